//! Binary checkpoint container shared by every trainable model: a magic
//! header, a version, the exact config bytes, and a named tensor table.
//! All integers are little endian; payloads are f32. Bundle helpers pair
//! the container with each model so a save and load round trip reproduces
//! weights bit-exactly and the config byte-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionConfig, DiffusionModel};
use crate::error::{Error, Result};
use crate::eval::{ActionClassifier, DualEncoder, ExtractorConfig};
use crate::motion::NormStats;
use crate::nn::Params;
use crate::numerics::Tensor;
use crate::vae::{MotionVae, VaeConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MLDC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: u8 = 8;
const MAX_NUMEL: u64 = 1 << 30;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// In-memory checkpoint: config bytes are preserved exactly as written and
/// tensors are keyed by name in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_json: Vec<u8>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Package a config and a parameter set, serializing the config as
    /// compact JSON.
    pub fn from_model<C: Serialize>(config: &C, params: &Params) -> Result<Checkpoint> {
        let config_json = serde_json::to_vec(config)?;
        let mut tensors = BTreeMap::new();
        for (name, t) in params.iter() {
            tensors.insert(name.clone(), t.clone());
        }
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            config_json,
            tensors,
        })
    }

    /// Parse the config blob into a typed config.
    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_slice(&self.config_json).map_err(Error::from)
    }

    /// Rebuild a parameter set from the tensor table.
    pub fn to_params(&self) -> Params {
        let mut params = Params::new();
        for (name, t) in &self.tensors {
            params.insert(name.clone(), t.clone());
        }
        params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.config_json);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if name.len() > MAX_NAME_LEN {
                return Err(Error::InvalidArgument(format!(
                    "tensor name too long ({} bytes)",
                    name.len()
                )));
            }
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            let dims = t.dims();
            buf.push(dims.len() as u8);
            for &d in dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, &buf).map_err(|e| Error::io(path_str(path), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path_str(path), e))?;
        let mut head = [0u8; 12];
        file.read_exact(&mut head).map_err(|_| Error::Truncated {
            path: path_str(path),
            detail: "file shorter than the 12-byte header".into(),
        })?;
        let magic: [u8; 4] = head[0..4].try_into().expect("fixed slice");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path_str(path),
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("fixed slice"));
        if version > CHECKPOINT_VERSION {
            return Err(Error::VersionUnsupported {
                path: path_str(path),
                found: version,
                max: CHECKPOINT_VERSION,
            });
        }
        let config_len = u32::from_le_bytes(head[8..12].try_into().expect("fixed slice"));
        let mut config_json = vec![0u8; config_len as usize];
        file.read_exact(&mut config_json)
            .map_err(|_| Error::Truncated {
                path: path_str(path),
                detail: format!("config blob cut short of {config_len} bytes"),
            })?;

        let corrupt = |detail: String| Error::CorruptTable {
            path: path_str(path),
            detail,
        };
        let mut rest = Vec::new();
        file.read_to_end(&mut rest)
            .map_err(|e| Error::io(path_str(path), e))?;
        let mut off = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if off + n > rest.len() {
                return Err(Error::CorruptTable {
                    path: path_str(path),
                    detail: format!("{what} cut short at byte {off}"),
                });
            }
            let s = &rest[off..off + n];
            off += n;
            Ok(s)
        };

        let count = u32::from_le_bytes(take(4, "tensor count")?.try_into().expect("fixed"));
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let name_len =
                u16::from_le_bytes(take(2, "name length")?.try_into().expect("fixed")) as usize;
            let name = String::from_utf8(take(name_len, "tensor name")?.to_vec())
                .map_err(|_| corrupt(format!("tensor {i} name is not utf-8")))?;
            let rank = take(1, "rank")?[0];
            if rank == 0 || rank > MAX_RANK {
                return Err(corrupt(format!("tensor {name} has invalid rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            let mut numel = 1u64;
            for _ in 0..rank {
                let d = u32::from_le_bytes(take(4, "dim")?.try_into().expect("fixed")) as u64;
                numel = numel.saturating_mul(d);
                dims.push(d as usize);
            }
            if numel > MAX_NUMEL {
                return Err(corrupt(format!(
                    "tensor {name} declares {numel} elements, over the limit"
                )));
            }
            let payload = take(numel as usize * 4, "payload")?;
            let mut data = Vec::with_capacity(numel as usize);
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().expect("fixed")));
            }
            let t = Tensor::from_vec(dims, data)
                .map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor name {name}")));
            }
        }
        if off != rest.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after the declared table",
                rest.len() - off
            )));
        }
        Ok(Checkpoint {
            version,
            config_json,
            tensors,
        })
    }

    /// Human-readable listing for the inspect command.
    pub fn summary(&self) -> String {
        let kind = serde_json::from_slice::<serde_json::Value>(&self.config_json)
            .ok()
            .and_then(|v| v.get("kind").and_then(|k| k.as_str().map(String::from)))
            .unwrap_or_else(|| "unknown".into());
        let total: usize = self.tensors.values().map(|t| t.numel()).sum();
        let mut out = format!(
            "kind: {kind}\nversion: {}\ntensors: {} ({} parameters)\n",
            self.version,
            self.tensors.len(),
            total
        );
        for (name, t) in &self.tensors {
            out.push_str(&format!("  {name}: {:?}\n", t.dims()));
        }
        out
    }
}

const NORM_MEAN: &str = "norm/mean";
const NORM_STD: &str = "norm/std";

#[derive(Serialize, Deserialize)]
struct VaeMeta {
    kind: String,
    config: VaeConfig,
}

#[derive(Serialize, Deserialize)]
struct DiffusionMeta {
    kind: String,
    config: DiffusionConfig,
}

#[derive(Serialize, Deserialize)]
struct DualEncoderMeta {
    kind: String,
    config: ExtractorConfig,
    feature_dim: usize,
    text_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    config: ExtractorConfig,
    feature_dim: usize,
    n_actions: usize,
}

fn expect_kind(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Incompatible(format!(
            "checkpoint holds a {found} model, expected {expected}"
        )));
    }
    Ok(())
}

/// Save a motion VAE together with the corpus normalization it was trained
/// under.
pub fn save_vae(path: &Path, vae: &MotionVae, stats: &NormStats) -> Result<()> {
    let meta = VaeMeta {
        kind: "vae".into(),
        config: vae.config().clone(),
    };
    let mut ckpt = Checkpoint::from_model(&meta, vae.params())?;
    let f = stats.mean.len();
    ckpt.tensors.insert(
        NORM_MEAN.into(),
        Tensor::from_vec(vec![1, f], stats.mean.clone())?,
    );
    ckpt.tensors.insert(
        NORM_STD.into(),
        Tensor::from_vec(vec![1, f], stats.std.clone())?,
    );
    ckpt.save(path)
}

pub fn load_vae(path: &Path) -> Result<(MotionVae, NormStats)> {
    let mut ckpt = Checkpoint::load(path)?;
    let meta: VaeMeta = ckpt.config()?;
    expect_kind(&meta.kind, "vae")?;
    let mean = ckpt
        .tensors
        .remove(NORM_MEAN)
        .ok_or_else(|| Error::MissingTensor {
            name: NORM_MEAN.into(),
        })?;
    let std = ckpt
        .tensors
        .remove(NORM_STD)
        .ok_or_else(|| Error::MissingTensor {
            name: NORM_STD.into(),
        })?;
    if mean.numel() != meta.config.feature_dim || std.numel() != meta.config.feature_dim {
        return Err(Error::Incompatible(format!(
            "normalization width {} does not match feature_dim {}",
            mean.numel(),
            meta.config.feature_dim
        )));
    }
    let mut vae = MotionVae::init(meta.config, 0)?;
    vae.set_params(ckpt.to_params())?;
    let stats = NormStats {
        mean: mean.data().to_vec(),
        std: std.data().to_vec(),
    };
    Ok((vae, stats))
}

pub fn save_diffusion(path: &Path, model: &DiffusionModel) -> Result<()> {
    let meta = DiffusionMeta {
        kind: "diffusion".into(),
        config: model.config().clone(),
    };
    Checkpoint::from_model(&meta, model.params())?.save(path)
}

pub fn load_diffusion(path: &Path) -> Result<DiffusionModel> {
    let ckpt = Checkpoint::load(path)?;
    let meta: DiffusionMeta = ckpt.config()?;
    expect_kind(&meta.kind, "diffusion")?;
    let mut model = DiffusionModel::init(meta.config, 0)?;
    model.set_params(ckpt.to_params())?;
    Ok(model)
}

pub fn save_dual_encoder(path: &Path, model: &DualEncoder) -> Result<()> {
    let meta = DualEncoderMeta {
        kind: "dual_encoder".into(),
        config: model.config().clone(),
        feature_dim: model.feature_dim(),
        text_dim: model.text_dim(),
    };
    Checkpoint::from_model(&meta, model.params())?.save(path)
}

pub fn load_dual_encoder(path: &Path) -> Result<DualEncoder> {
    let ckpt = Checkpoint::load(path)?;
    let meta: DualEncoderMeta = ckpt.config()?;
    expect_kind(&meta.kind, "dual_encoder")?;
    let mut model = DualEncoder::init(meta.config, meta.feature_dim, meta.text_dim, 0)?;
    model.set_params(ckpt.to_params())?;
    Ok(model)
}

pub fn save_classifier(path: &Path, model: &ActionClassifier) -> Result<()> {
    let meta = ClassifierMeta {
        kind: "action_classifier".into(),
        config: model.config().clone(),
        feature_dim: model.feature_dim(),
        n_actions: model.n_actions(),
    };
    Checkpoint::from_model(&meta, model.params())?.save(path)
}

pub fn load_classifier(path: &Path) -> Result<ActionClassifier> {
    let ckpt = Checkpoint::load(path)?;
    let meta: ClassifierMeta = ckpt.config()?;
    expect_kind(&meta.kind, "action_classifier")?;
    let mut model =
        ActionClassifier::init(meta.config, meta.feature_dim, meta.n_actions, 0)?;
    model.set_params(ckpt.to_params())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cond::{CondConfig, TextEmbedProvider};
    use crate::diffusion::{CondSource, DenoiserConfig, ScheduleConfig};
    use crate::motion::{generate, MotionSequence, SynthSpec};
    use crate::rng::CounterRng;

    fn scratch() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn probe_motion(seed: u64) -> MotionSequence {
        let (_, motions) = generate(&SynthSpec {
            n_sequences: 2,
            n_actions: 2,
            min_len: 12,
            max_len: 12,
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        motions.into_iter().next().unwrap()
    }

    fn synth_feature_dim() -> usize {
        crate::motion::PoseLayout::new(5, true).unwrap().feature_dim()
    }

    fn toy_vae(seed: u64) -> MotionVae {
        MotionVae::init(
            VaeConfig {
                feature_dim: synth_feature_dim(),
                d: 16,
                layers: 3,
                heads: 2,
                ff_hidden: Some(32),
                n_latent_tokens: 1,
                max_len: 64,
                ..VaeConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = scratch();
        let path = dir.path().join("raw.mldc");
        let mut tensors = BTreeMap::new();
        let mut rng = CounterRng::new(1).fork_str("ckpt");
        let mut odd = Tensor::zeros(&[3, 7]);
        for v in odd.data_mut() {
            *v = rng.normal_f32();
        }
        tensors.insert("a/w".to_string(), odd);
        tensors.insert("b".to_string(), Tensor::from_vec(vec![1, 1], vec![-0.0]).unwrap());
        // Non-canonical spacing must survive byte-for-byte.
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_json: b"{ \"kind\":  \"probe\" }".to_vec(),
            tensors,
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.version, ckpt.version);
        assert_eq!(back.config_json, ckpt.config_json);
        assert_eq!(back.tensors.len(), 2);
        for (name, t) in &ckpt.tensors {
            let b = &back.tensors[name];
            assert_eq!(b.dims(), t.dims());
            assert!(b
                .data()
                .iter()
                .zip(t.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(back.summary().contains("probe"));
    }

    #[test]
    fn rejects_bad_magic_and_newer_version() {
        let dir = scratch();
        let path = dir.path().join("v.mldc");
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION + 1,
            config_json: b"{}".to_vec(),
            tensors: BTreeMap::new(),
        };
        ckpt.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::VersionUnsupported { found, .. }) if found == CHECKPOINT_VERSION + 1
        ));

        let garbled = dir.path().join("m.mldc");
        fs::write(&garbled, b"NOPE00000000").unwrap();
        assert!(matches!(
            Checkpoint::load(&garbled),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_at_any_section_errors() {
        let dir = scratch();
        let path = dir.path().join("full.mldc");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "w".to_string(),
            Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_json: b"{\"kind\":\"t\"}".to_vec(),
            tensors,
        };
        ckpt.save(&path).unwrap();
        let full = fs::read(&path).unwrap();

        for cut in [4usize, 11, 14, full.len() - 9, full.len() - 1] {
            let part = dir.path().join(format!("cut{cut}.mldc"));
            fs::write(&part, &full[..cut]).unwrap();
            assert!(
                Checkpoint::load(&part).is_err(),
                "cut at {cut} should fail"
            );
        }
        // Trailing garbage is rejected too.
        let mut padded = full.clone();
        padded.push(0);
        let pad_path = dir.path().join("pad.mldc");
        fs::write(&pad_path, &padded).unwrap();
        assert!(matches!(
            Checkpoint::load(&pad_path),
            Err(Error::CorruptTable { .. })
        ));
    }

    #[test]
    fn vae_bundle_round_trips_encode_outputs() {
        let dir = scratch();
        let path = dir.path().join("vae.mldc");
        let vae = toy_vae(9);
        let f = synth_feature_dim();
        let mut stats = NormStats::identity(f);
        stats.mean[3] = 0.25;
        stats.std[4] = 2.0;
        save_vae(&path, &vae, &stats).unwrap();

        let (back, back_stats) = load_vae(&path).unwrap();
        assert_eq!(back_stats.mean, stats.mean);
        assert_eq!(back_stats.std, stats.std);

        let probe = probe_motion(3);
        let a = vae.encode(&probe).unwrap();
        let b = back.encode(&probe).unwrap();
        assert_eq!(a.mu.max_abs_diff(&b.mu), 0.0);
        assert_eq!(a.log_sigma.max_abs_diff(&b.log_sigma), 0.0);
    }

    #[test]
    fn diffusion_bundle_round_trips_denoise_outputs() {
        let dir = scratch();
        let path = dir.path().join("dm.mldc");
        let config = DiffusionConfig {
            denoiser: DenoiserConfig {
                d: 16,
                layers: 3,
                heads: 2,
                ff_hidden: Some(32),
                ..DenoiserConfig::default()
            },
            schedule: ScheduleConfig {
                t_steps: 10,
                ..ScheduleConfig::default()
            },
            cond: CondConfig {
                d: 16,
                provider_dim: 8,
                ..CondConfig::default()
            },
            source: CondSource::Text,
            ..DiffusionConfig::default()
        };
        let model = DiffusionModel::init(config, 5).unwrap();
        save_diffusion(&path, &model).unwrap();
        let back = load_diffusion(&path).unwrap();

        let mut rng = CounterRng::new(8).fork_str("probe");
        let mut z = Tensor::zeros(&[1, 16]);
        for v in z.data_mut() {
            *v = rng.normal_f32();
        }
        let a = model.denoise(&z, 3, None).unwrap();
        let b = back.denoise(&z, 3, None).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);

        // A vae bundle is not a diffusion bundle.
        let vae_path = dir.path().join("vae.mldc");
        save_vae(&vae_path, &toy_vae(1), &NormStats::identity(synth_feature_dim())).unwrap();
        assert!(matches!(
            load_diffusion(&vae_path),
            Err(Error::Incompatible(_)) | Err(Error::Json(_))
        ));
    }

    #[test]
    fn cross_config_load_names_both_shapes() {
        let dir = scratch();
        let path = dir.path().join("tampered.mldc");
        let f = synth_feature_dim();
        let vae = toy_vae(2);
        // Claim a different latent width than the stored tensors have.
        let mut wrong = vae.config().clone();
        wrong.d = 32;
        wrong.heads = 4;
        let meta = VaeMeta {
            kind: "vae".into(),
            config: wrong,
        };
        let mut ckpt = Checkpoint::from_model(&meta, vae.params()).unwrap();
        ckpt.tensors.insert(
            NORM_MEAN.into(),
            Tensor::from_vec(vec![1, f], vec![0.0; f]).unwrap(),
        );
        ckpt.tensors.insert(
            NORM_STD.into(),
            Tensor::from_vec(vec![1, f], vec![1.0; f]).unwrap(),
        );
        ckpt.save(&path).unwrap();
        let err = load_vae(&path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("16") && msg.contains("32"),
            "error should name both shapes: {msg}"
        );
    }

    #[test]
    fn extractor_bundles_round_trip() {
        let dir = scratch();
        let (entries, motions) = generate(&SynthSpec {
            n_sequences: 12,
            n_actions: 2,
            min_len: 12,
            max_len: 16,
            ..SynthSpec::default()
        })
        .unwrap();
        let corpus = crate::motion::Corpus { entries, motions };
        let provider = TextEmbedProvider::hash(1, 16).unwrap();
        let config = ExtractorConfig {
            hidden: 16,
            out_dim: 8,
            ..ExtractorConfig::default()
        };

        let (dual, _) =
            crate::eval::train_dual_encoder(&corpus, &provider, config.clone(), 2, 3).unwrap();
        let dual_path = dir.path().join("dual.mldc");
        save_dual_encoder(&dual_path, &dual).unwrap();
        let dual_back = load_dual_encoder(&dual_path).unwrap();
        let fa = dual.encode_motion(&corpus.motions[0]).unwrap();
        let fb = dual_back.encode_motion(&corpus.motions[0]).unwrap();
        assert_eq!(fa.max_abs_diff(&fb), 0.0);

        let (clf, _) = crate::eval::train_classifier(&corpus, config, 2, 3).unwrap();
        let clf_path = dir.path().join("clf.mldc");
        save_classifier(&clf_path, &clf).unwrap();
        let clf_back = load_classifier(&clf_path).unwrap();
        let la = clf.logits(&corpus.motions[1]).unwrap();
        let lb = clf_back.logits(&corpus.motions[1]).unwrap();
        assert_eq!(la.max_abs_diff(&lb), 0.0);

        // Loading the wrong kind fails cleanly.
        assert!(load_classifier(&dual_path).is_err());
    }
}
