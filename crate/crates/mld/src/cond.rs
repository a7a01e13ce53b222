//! Condition embedders: map text, action labels, or the empty condition to
//! m x d token blocks for the denoiser. Text vectors come from a frozen
//! provider (a file-backed lookup table or a deterministic n-gram hash) and
//! pass through a learned projection; action labels index a learnable table;
//! the empty condition is a single learned null token shared by all kinds.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::motion::{import_raw_f32, read_mot, write_mot};
use crate::nn::{BoundParams, Linear, Params};
use crate::numerics::{Graph, Scalar, Tensor, Value};
use crate::rng::CounterRng;
use crate::{Error, Result};

/// Rows in word-wise token mode, matching the usual text-encoder context.
pub const WORD_CONTEXT: usize = 77;

/// What a sample is conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Text { text: String },
    Action { id: usize },
    None,
}

impl Condition {
    pub fn text(s: impl Into<String>) -> Condition {
        Condition::Text { text: s.into() }
    }

    pub fn action(id: usize) -> Condition {
        Condition::Action { id }
    }
}

/// An embedded condition: `m x d` token block ready for the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct CondTokens {
    pub tokens: Tensor,
}

impl CondTokens {
    pub fn m(&self) -> usize {
        self.tokens.rows()
    }

    pub fn d(&self) -> usize {
        self.tokens.cols()
    }
}

/// Exact-match lookup key: trimmed and lowercased.
pub fn normalize_text(text: &str) -> String {
    text.trim().to_lowercase()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Frozen source of raw text vectors. Neither variant has trainable state:
/// the table is loaded from disk and the hash is a pure function.
#[derive(Debug, Clone, PartialEq)]
pub enum TextEmbedProvider {
    /// Precomputed vectors keyed by normalized text.
    FileTable(BTreeMap<String, Vec<f32>>),
    /// Deterministic random projection of character trigram counts.
    Hash { seed: u64, dim: usize },
}

/// One line of the JSONL table format.
#[derive(Serialize, Deserialize)]
struct TableLine {
    text: String,
    vector: Vec<f32>,
}

impl TextEmbedProvider {
    pub fn hash(seed: u64, dim: usize) -> Result<TextEmbedProvider> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "hash provider needs a positive dim".into(),
            ));
        }
        Ok(TextEmbedProvider::Hash { seed, dim })
    }

    /// Build a table provider, normalizing keys and validating widths agree.
    pub fn from_table(entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let mut table = BTreeMap::new();
        let mut dim = None;
        for (text, vector) in entries {
            match dim {
                None => {
                    if vector.is_empty() {
                        return Err(Error::InvalidArgument(
                            "table vectors must be non-empty".into(),
                        ));
                    }
                    dim = Some(vector.len());
                }
                Some(d) if d != vector.len() => {
                    return Err(Error::InvalidArgument(format!(
                        "table vector widths disagree: {} vs {}",
                        d,
                        vector.len()
                    )));
                }
                _ => {}
            }
            table.insert(normalize_text(&text), vector);
        }
        if table.is_empty() {
            return Err(Error::InvalidArgument("embedding table is empty".into()));
        }
        Ok(TextEmbedProvider::FileTable(table))
    }

    /// Vector width this provider produces.
    pub fn dim(&self) -> usize {
        match self {
            TextEmbedProvider::FileTable(t) => {
                t.values().next().map(|v| v.len()).unwrap_or(0)
            }
            TextEmbedProvider::Hash { dim, .. } => *dim,
        }
    }

    /// One pooled vector for the whole normalized text.
    pub fn embed_pooled(&self, text: &str) -> Result<Vec<f32>> {
        let key = normalize_text(text);
        match self {
            TextEmbedProvider::FileTable(t) => t
                .get(&key)
                .cloned()
                .ok_or(Error::MissingTableEntry(key)),
            TextEmbedProvider::Hash { seed, dim } => Ok(hash_embed(*seed, *dim, &key)),
        }
    }

    /// Word-wise vectors: one row per whitespace token of the normalized
    /// text, zero rows past the last word, always `WORD_CONTEXT` rows.
    pub fn embed_words(&self, text: &str) -> Result<Tensor> {
        let key = normalize_text(text);
        let dim = self.dim();
        let mut out = Tensor::zeros(&[WORD_CONTEXT, dim]);
        for (i, word) in key.split_whitespace().take(WORD_CONTEXT).enumerate() {
            let v = self.embed_pooled(word)?;
            out.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(&v);
        }
        Ok(out)
    }

    /// Load a table from `.jsonl` lines or a `.mot` tensor with a
    /// `<path>.texts.json` sidecar listing one text per row.
    pub fn load_table(path: &Path) -> Result<TextEmbedProvider> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "jsonl" => {
                let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
                let mut entries = Vec::new();
                for line in BufReader::new(file).lines() {
                    let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let parsed: TableLine = serde_json::from_str(&line)?;
                    entries.push((parsed.text, parsed.vector));
                }
                TextEmbedProvider::from_table(entries)
            }
            "mot" => {
                let vectors = read_mot(path)?;
                let sidecar = sidecar_path(path);
                let raw =
                    std::fs::read_to_string(&sidecar).map_err(|e| Error::io(sidecar.display().to_string(), e))?;
                let texts: Vec<String> = serde_json::from_str(&raw)?;
                if texts.len() != vectors.rows() {
                    return Err(Error::CorruptTable {
                        path: sidecar.display().to_string(),
                        detail: format!(
                            "{} texts for {} vector rows",
                            texts.len(),
                            vectors.rows()
                        ),
                    });
                }
                let dim = vectors.cols();
                TextEmbedProvider::from_table(texts.into_iter().enumerate().map(|(i, t)| {
                    (t, vectors.data()[i * dim..(i + 1) * dim].to_vec())
                }))
            }
            other => Err(Error::InvalidArgument(format!(
                "embedding tables use .jsonl or .mot, got .{other}"
            ))),
        }
    }

    /// Write a table provider back to disk in the format the extension names.
    pub fn save_table(&self, path: &Path) -> Result<()> {
        let table = match self {
            TextEmbedProvider::FileTable(t) => t,
            TextEmbedProvider::Hash { .. } => {
                return Err(Error::InvalidArgument(
                    "hash providers have no table to save".into(),
                ))
            }
        };
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "jsonl" => {
                let mut out = Vec::new();
                for (text, vector) in table {
                    let line = serde_json::to_string(&TableLine {
                        text: text.clone(),
                        vector: vector.clone(),
                    })?;
                    out.extend_from_slice(line.as_bytes());
                    out.push(b'\n');
                }
                let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
                f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))
            }
            "mot" => {
                let dim = self.dim();
                let mut data = Vec::with_capacity(table.len() * dim);
                let mut texts = Vec::with_capacity(table.len());
                for (text, vector) in table {
                    texts.push(text.clone());
                    data.extend_from_slice(vector);
                }
                let t = Tensor::from_vec(vec![table.len(), dim], data)?;
                write_mot(path, &t)?;
                let sidecar = sidecar_path(path);
                let body = serde_json::to_string_pretty(&texts)?;
                std::fs::write(&sidecar, body).map_err(|e| Error::io(sidecar.display().to_string(), e))
            }
            other => Err(Error::InvalidArgument(format!(
                "embedding tables use .jsonl or .mot, got .{other}"
            ))),
        }
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".texts.json");
    std::path::PathBuf::from(s)
}

/// Unit-norm projection of character trigram counts onto `dim` axes drawn
/// from a per-trigram substream of the seed.
fn hash_embed(seed: u64, dim: usize, normalized: &str) -> Vec<f32> {
    let padded: Vec<char> = format!(" {normalized} ").chars().collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    if padded.len() < 3 {
        *counts.entry(padded.iter().collect()).or_insert(0) += 1;
    } else {
        for w in padded.windows(3) {
            *counts.entry(w.iter().collect()).or_insert(0) += 1;
        }
    }
    let base = CounterRng::new(seed).fork_str("text_hash");
    let mut acc = vec![0.0f64; dim];
    for (gram, count) in &counts {
        let mut rng = base.fork(fnv1a(gram.as_bytes()));
        for slot in acc.iter_mut() {
            *slot += *count as f64 * rng.normal();
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in acc.iter_mut() {
            *v /= norm;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Architecture of the learned condition pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondConfig {
    /// Token width; must match the denoiser width.
    pub d: usize,
    /// Action vocabulary size A; zero disables action conditioning.
    pub n_actions: usize,
    /// Emit one token per word (m=77) instead of one pooled token (m=1).
    pub word_wise: bool,
    /// Width of the frozen provider's vectors feeding the projection.
    pub provider_dim: usize,
}

impl Default for CondConfig {
    fn default() -> Self {
        CondConfig {
            d: 256,
            n_actions: 0,
            word_wise: false,
            provider_dim: 64,
        }
    }
}

impl CondConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("condition width d must be positive".into()));
        }
        if self.provider_dim == 0 {
            return Err(Error::Config("provider_dim must be positive".into()));
        }
        Ok(())
    }
}

const NULL_TOKEN: &str = "cond/null";
const ACTION_TABLE: &str = "cond/action_table";

/// The learned condition pathway: text projection, action table, null token.
/// Weights live in the shared parameter registry passed at init, so they are
/// optimized jointly with the denoiser.
#[derive(Debug, Clone)]
pub struct ConditionEmbedder {
    config: CondConfig,
    text_proj: Linear,
}

impl ConditionEmbedder {
    pub fn init(
        params: &mut Params,
        rng: &mut CounterRng,
        config: CondConfig,
    ) -> Result<ConditionEmbedder> {
        config.validate()?;
        let mut null = Tensor::zeros(&[1, config.d]);
        rng.fill_normal_f32(null.data_mut());
        null.scale_assign(0.02);
        params.insert(NULL_TOKEN, null);

        if config.n_actions > 0 {
            let mut table = Tensor::zeros(&[config.n_actions, config.d]);
            rng.fill_normal_f32(table.data_mut());
            table.scale_assign(0.02);
            params.insert(ACTION_TABLE, table);
        }

        let text_proj = Linear::init(
            params,
            rng,
            "cond/text_proj",
            config.provider_dim,
            config.d,
            true,
        );
        Ok(ConditionEmbedder { config, text_proj })
    }

    pub fn config(&self) -> &CondConfig {
        &self.config
    }

    fn provider_vectors(&self, provider: &TextEmbedProvider, text: &str) -> Result<Tensor> {
        if provider.dim() != self.config.provider_dim {
            return Err(Error::Incompatible(format!(
                "provider emits {} dims, embedder projection expects {}",
                provider.dim(),
                self.config.provider_dim
            )));
        }
        if self.config.word_wise {
            provider.embed_words(text)
        } else {
            let v = provider.embed_pooled(text)?;
            Tensor::from_vec(vec![1, self.config.provider_dim], v)
        }
    }

    /// Graph-level embedding so gradients reach the projection, table, and
    /// null token during training.
    pub fn tokens_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        provider: &TextEmbedProvider,
        cond: &Condition,
    ) -> Result<Value> {
        match cond {
            Condition::Text { text } => {
                let raw = self.provider_vectors(provider, text)?;
                let rv = g.constant(&raw.cast::<T>());
                self.text_proj.forward(g, bp, rv)
            }
            Condition::Action { id } => {
                if self.config.n_actions == 0 {
                    return Err(Error::UnsupportedCondition(
                        "embedder was built without an action table".into(),
                    ));
                }
                if *id >= self.config.n_actions {
                    return Err(Error::UnsupportedCondition(format!(
                        "action id {} out of range 0..{}",
                        id, self.config.n_actions
                    )));
                }
                let table = bp.val(ACTION_TABLE)?;
                g.slice_rows(table, *id, *id + 1)
            }
            Condition::None => self.null_graph(g, bp),
        }
    }

    /// The learned null token as a graph value.
    pub fn null_graph<T: Scalar>(&self, _g: &mut Graph<T>, bp: &BoundParams) -> Result<Value> {
        bp.val(NULL_TOKEN)
    }

    fn run_frozen(
        &self,
        params: &Params,
        provider: &TextEmbedProvider,
        cond: &Condition,
    ) -> Result<CondTokens> {
        let mut g = Graph::<f32>::new();
        let bp = params.bind_frozen(&mut g);
        let v = self.tokens_graph(&mut g, &bp, provider, cond)?;
        Ok(CondTokens {
            tokens: g.value(v).clone(),
        })
    }

    /// Project the provider's vectors for this text to condition tokens.
    pub fn embed_text(
        &self,
        params: &Params,
        provider: &TextEmbedProvider,
        text: &str,
    ) -> Result<CondTokens> {
        self.run_frozen(params, provider, &Condition::text(text))
    }

    /// Row `id` of the learnable action table.
    pub fn embed_action(&self, params: &Params, id: usize) -> Result<CondTokens> {
        // The provider is unused for actions; any placeholder works.
        let provider = TextEmbedProvider::Hash {
            seed: 0,
            dim: self.config.provider_dim,
        };
        self.run_frozen(params, &provider, &Condition::action(id))
    }

    /// The learned null token, 1 x d.
    pub fn null_tokens(&self, params: &Params) -> Result<CondTokens> {
        let provider = TextEmbedProvider::Hash {
            seed: 0,
            dim: self.config.provider_dim,
        };
        self.run_frozen(params, &provider, &Condition::None)
    }
}

/// Convenience for tests and tools: cosine similarity of two equal-length
/// vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-12)
}

/// Import a raw `rows x cols` f32 dump plus a text list into a table file.
/// Bridges externally computed embeddings into the artifact's formats.
pub fn import_embedding_table(
    raw_path: &Path,
    texts: &[String],
    dim: usize,
    out_path: &Path,
) -> Result<()> {
    let vectors = import_raw_f32(raw_path, texts.len(), dim)?;
    let provider = TextEmbedProvider::from_table(texts.iter().enumerate().map(|(i, t)| {
        (
            t.clone(),
            vectors.data()[i * dim..(i + 1) * dim].to_vec(),
        )
    }))?;
    provider.save_table(out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{generate, SynthSpec};

    fn hash_provider() -> TextEmbedProvider {
        TextEmbedProvider::hash(7, 64).unwrap()
    }

    #[test]
    fn hash_embedding_is_deterministic_and_normalized() {
        let p = hash_provider();
        let a = p.embed_pooled("a person walks slowly").unwrap();
        let b = p.embed_pooled("a person walks slowly").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        // Normalization folds case and surrounding whitespace.
        let c = p.embed_pooled("  A Person Walks SLOWLY ").unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn hash_separates_corpus_vocabulary() {
        let spec = SynthSpec::default();
        let (entries, _) = generate(&spec).unwrap();
        let p = hash_provider();
        let mut texts: Vec<String> = entries
            .iter()
            .filter_map(|e| e.text.clone())
            .map(|t| normalize_text(&t))
            .collect();
        texts.sort();
        texts.dedup();
        assert!(texts.len() >= 8, "expected a varied vocabulary");
        let vecs: Vec<Vec<f32>> = texts
            .iter()
            .map(|t| p.embed_pooled(t).unwrap())
            .collect();
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let c = cosine(&vecs[i], &vecs[j]);
                assert!(
                    c < 0.99,
                    "cosine {c} too high for {:?} vs {:?}",
                    texts[i],
                    texts[j]
                );
            }
        }
    }

    #[test]
    fn file_table_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let base = TextEmbedProvider::from_table(vec![
            ("A person jumps".to_string(), vec![0.1, -0.25, 3.0]),
            ("a person spins".to_string(), vec![1.5, 0.0, -2.0]),
        ])
        .unwrap();

        for name in ["table.jsonl", "table.mot"] {
            let path = dir.path().join(name);
            base.save_table(&path).unwrap();
            let loaded = TextEmbedProvider::load_table(&path).unwrap();
            assert_eq!(base, loaded, "{name}");
            assert_eq!(
                loaded.embed_pooled(" a PERSON jumps ").unwrap(),
                vec![0.1, -0.25, 3.0]
            );
        }
    }

    #[test]
    fn file_table_missing_entry_errors() {
        let p = TextEmbedProvider::from_table(vec![("known".to_string(), vec![1.0, 2.0])])
            .unwrap();
        match p.embed_pooled("unknown") {
            Err(Error::MissingTableEntry(t)) => assert_eq!(t, "unknown"),
            other => panic!("expected missing-entry error, got {other:?}"),
        }
    }

    #[test]
    fn embedder_text_action_null_are_deterministic() {
        let mut params = Params::new();
        let mut rng = CounterRng::new(3);
        let config = CondConfig {
            d: 16,
            n_actions: 4,
            word_wise: false,
            provider_dim: 64,
        };
        let emb = ConditionEmbedder::init(&mut params, &mut rng, config).unwrap();
        let provider = hash_provider();

        let a = emb.embed_text(&params, &provider, "a person waves").unwrap();
        let b = emb.embed_text(&params, &provider, "a person waves").unwrap();
        assert_eq!(a.tokens.data(), b.tokens.data());
        assert_eq!((a.m(), a.d()), (1, 16));

        let x = emb.embed_action(&params, 0).unwrap();
        let y = emb.embed_action(&params, 0).unwrap();
        assert_eq!(x.tokens.data(), y.tokens.data());
        assert!(emb.embed_action(&params, 4).is_err());

        let n1 = emb.null_tokens(&params).unwrap();
        let n2 = emb.null_tokens(&params).unwrap();
        assert_eq!(n1.tokens.data(), n2.tokens.data());
        assert_eq!((n1.m(), n1.d()), (1, 16));
    }

    #[test]
    fn word_wise_mode_produces_context_rows() {
        let mut params = Params::new();
        let mut rng = CounterRng::new(5);
        let config = CondConfig {
            d: 16,
            n_actions: 0,
            word_wise: true,
            provider_dim: 64,
        };
        let emb = ConditionEmbedder::init(&mut params, &mut rng, config).unwrap();
        let provider = hash_provider();
        let t = emb
            .embed_text(&params, &provider, "a person crouches low")
            .unwrap();
        assert_eq!((t.m(), t.d()), (WORD_CONTEXT, 16));
        // Rows past the last word all collapse to the projection bias.
        let pad_a = t.tokens.row(10).to_vec();
        let pad_b = t.tokens.row(60).to_vec();
        assert_eq!(pad_a, pad_b);
        // Word rows differ from padding.
        assert_ne!(t.tokens.row(0).to_vec(), pad_a);
    }

    #[test]
    fn action_gradient_hits_exactly_one_row() {
        let mut params = Params::new();
        let mut rng = CounterRng::new(9);
        let config = CondConfig {
            d: 8,
            n_actions: 5,
            word_wise: false,
            provider_dim: 16,
        };
        let emb = ConditionEmbedder::init(&mut params, &mut rng, config).unwrap();
        let provider = TextEmbedProvider::hash(0, 16).unwrap();

        let mut g = Graph::<f32>::new();
        let bp = params.bind(&mut g);
        let tok = emb
            .tokens_graph(&mut g, &bp, &provider, &Condition::action(2))
            .unwrap();
        let sq = g.mul(tok, tok).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let table_grad = grads.for_param(&g, bp.val(ACTION_TABLE).unwrap());
        for r in 0..5 {
            let nonzero = table_grad.row(r).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, r == 2, "row {r}");
        }
    }

    #[test]
    fn provider_width_mismatch_is_rejected() {
        let mut params = Params::new();
        let mut rng = CounterRng::new(11);
        let config = CondConfig {
            d: 8,
            n_actions: 0,
            word_wise: false,
            provider_dim: 32,
        };
        let emb = ConditionEmbedder::init(&mut params, &mut rng, config).unwrap();
        let provider = TextEmbedProvider::hash(1, 64).unwrap();
        assert!(emb.embed_text(&params, &provider, "anything").is_err());
    }

    #[test]
    fn import_raw_embeddings_to_table() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("vectors.bin");
        let floats: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bytes: Vec<u8> = floats.iter().flat_map(|f| f.to_le_bytes()).collect();
        std::fs::write(&raw, bytes).unwrap();

        let out = dir.path().join("table.jsonl");
        let texts = vec!["first".to_string(), "second".to_string()];
        import_embedding_table(&raw, &texts, 3, &out).unwrap();
        let p = TextEmbedProvider::load_table(&out).unwrap();
        assert_eq!(p.embed_pooled("second").unwrap(), vec![4.0, 5.0, 6.0]);
    }
}
