//! Learned feature extractors backing the distribution metrics: a dual
//! text-motion encoder trained contrastively and a small action classifier.
//! Both consume raw motion features frame by frame, pool over time, and are
//! intentionally tiny so they train in seconds on a desk-scale corpus.

use serde::{Deserialize, Serialize};

use crate::cond::TextEmbedProvider;
use crate::error::{Error, Result};
use crate::motion::{Corpus, MotionSequence};
use crate::nn::{apply_grads, BoundParams, Linear, Params};
use crate::numerics::{AdamwParams, Graph, OptimState, Tensor, Value};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub hidden: usize,
    pub out_dim: usize,
    pub lr: f64,
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            out_dim: 32,
            lr: 1e-3,
            temperature: 0.1,
            batch_size: 16,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.out_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "extractor sizes and batch size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("extractor lr must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

fn replace_params(current: &mut Params, incoming: Params) -> Result<()> {
    if incoming.len() != current.len() {
        return Err(Error::Incompatible(format!(
            "expected {} tensors, got {}",
            current.len(),
            incoming.len()
        )));
    }
    for (name, t) in incoming.iter() {
        let cur = current.get(name)?;
        if cur.dims() != t.dims() {
            return Err(Error::Incompatible(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.dims(),
                cur.dims()
            )));
        }
    }
    *current = incoming;
    Ok(())
}

fn frame_mlp(
    g: &mut Graph<f32>,
    bp: &BoundParams,
    l1: &Linear,
    l2: &Linear,
    x: Value,
) -> Result<Value> {
    let h = l1.forward(g, bp, x)?;
    let h = g.gelu(h)?;
    let pooled = g.mean_rows(h)?;
    let h = l2.forward(g, bp, pooled)?;
    g.gelu(h)
}

/// Contrastive text-motion embedder. Motions go through a per-frame MLP and
/// mean pooling, texts through an MLP over the provider vector; both end in
/// unit-norm rows of width `out_dim`.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    config: ExtractorConfig,
    feature_dim: usize,
    text_dim: usize,
    params: Params,
    motion_l1: Linear,
    motion_l2: Linear,
    motion_out: Linear,
    text_l1: Linear,
    text_out: Linear,
}

impl DualEncoder {
    pub fn init(
        config: ExtractorConfig,
        feature_dim: usize,
        text_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 || text_dim == 0 {
            return Err(Error::Config(
                "dual encoder needs positive feature and text widths".into(),
            ));
        }
        let mut rng = CounterRng::new(seed).fork_str("dual_init");
        let mut params = Params::new();
        let h = config.hidden;
        let motion_l1 = Linear::init(&mut params, &mut rng, "dual/motion_l1", feature_dim, h, true);
        let motion_l2 = Linear::init(&mut params, &mut rng, "dual/motion_l2", h, h, true);
        let motion_out = Linear::init(&mut params, &mut rng, "dual/motion_out", h, config.out_dim, true);
        let text_l1 = Linear::init(&mut params, &mut rng, "dual/text_l1", text_dim, h, true);
        let text_out = Linear::init(&mut params, &mut rng, "dual/text_out", h, config.out_dim, true);
        Ok(Self {
            config,
            feature_dim,
            text_dim,
            params,
            motion_l1,
            motion_l2,
            motion_out,
            text_l1,
            text_out,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    /// Replace the weights, validating names and shapes.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        replace_params(&mut self.params, params)
    }

    fn motion_graph(&self, g: &mut Graph<f32>, bp: &BoundParams, x: Value) -> Result<Value> {
        let h = frame_mlp(g, bp, &self.motion_l1, &self.motion_l2, x)?;
        let out = self.motion_out.forward(g, bp, h)?;
        g.normalize_rows(out, 1e-6)
    }

    fn text_graph(&self, g: &mut Graph<f32>, bp: &BoundParams, v: Value) -> Result<Value> {
        let h = self.text_l1.forward(g, bp, v)?;
        let h = g.gelu(h)?;
        let out = self.text_out.forward(g, bp, h)?;
        g.normalize_rows(out, 1e-6)
    }

    /// Unit-norm feature row for one motion.
    pub fn encode_motion(&self, seq: &MotionSequence) -> Result<Tensor> {
        if seq.data.cols() != self.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_motion",
                detail: format!("{} columns vs model {}", seq.data.cols(), self.feature_dim),
            });
        }
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.leaf(&seq.data);
        let out = self.motion_graph(&mut g, &bound, x)?;
        Ok(g.value(out).clone())
    }

    /// Stacked feature rows for a batch of motions.
    pub fn encode_motions(&self, seqs: &[MotionSequence]) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("no motions to encode".into()));
        }
        let mut out = Tensor::zeros(&[seqs.len(), self.config.out_dim]);
        for (i, seq) in seqs.iter().enumerate() {
            let row = self.encode_motion(seq)?;
            out.data_mut()[i * self.config.out_dim..(i + 1) * self.config.out_dim]
                .copy_from_slice(row.data());
        }
        Ok(out)
    }

    /// Unit-norm feature row for one text.
    pub fn encode_text(&self, provider: &TextEmbedProvider, text: &str) -> Result<Tensor> {
        if provider.dim() != self.text_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_text",
                detail: format!("provider dim {} vs model {}", provider.dim(), self.text_dim),
            });
        }
        let vec = provider.embed_pooled(text)?;
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let v = g.leaf(&Tensor::from_vec(vec![1, self.text_dim], vec)?);
        let out = self.text_graph(&mut g, &bound, v)?;
        Ok(g.value(out).clone())
    }

    pub fn encode_texts(&self, provider: &TextEmbedProvider, texts: &[&str]) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument("no texts to encode".into()));
        }
        let mut out = Tensor::zeros(&[texts.len(), self.config.out_dim]);
        for (i, text) in texts.iter().enumerate() {
            let row = self.encode_text(provider, text)?;
            out.data_mut()[i * self.config.out_dim..(i + 1) * self.config.out_dim]
                .copy_from_slice(row.data());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualReport {
    pub per_epoch: Vec<f64>,
    pub holdout_matched: f64,
    pub holdout_mismatched: f64,
}

fn shuffled(rng: &mut CounterRng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        idx.swap(i, j);
    }
    idx
}

fn split_holdout(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = CounterRng::new(seed).fork_str("split");
    let order = shuffled(&mut rng, n);
    let held = n / 4;
    (order[held..].to_vec(), order[..held].to_vec())
}

fn mean_row_distance(a: &Tensor, b: &Tensor, shift: usize) -> f64 {
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let j = (i + shift) % n;
        total += a
            .row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| {
                let d = (*x - *y) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
    }
    total / n as f64
}

/// Train a dual encoder on a captioned corpus with a symmetric contrastive
/// loss. A quarter of the corpus is held out; the report carries the mean
/// matched and mismatched held-out distances.
pub fn train_dual_encoder(
    corpus: &Corpus,
    provider: &TextEmbedProvider,
    config: ExtractorConfig,
    epochs: usize,
    seed: u64,
) -> Result<(DualEncoder, DualReport)> {
    config.validate()?;
    if corpus.len() < 8 {
        return Err(Error::InvalidArgument(format!(
            "dual encoder training needs at least 8 sequences, got {}",
            corpus.len()
        )));
    }
    let texts: Vec<&str> = corpus
        .entries
        .iter()
        .map(|e| {
            e.text.as_deref().ok_or_else(|| {
                Error::Config(format!("entry {} has no text caption", e.path))
            })
        })
        .collect::<Result<_>>()?;
    let text_vecs: Vec<Tensor> = texts
        .iter()
        .map(|t| {
            let v = provider.embed_pooled(t)?;
            Tensor::from_vec(vec![1, provider.dim()], v)
        })
        .collect::<Result<_>>()?;

    let feature_dim = corpus.motions[0].data.cols();
    let mut model = DualEncoder::init(config.clone(), feature_dim, provider.dim(), seed)?;
    let (train_idx, held_idx) = split_holdout(corpus.len(), seed);

    let mut opt = OptimState::<f32>::new();
    let h = AdamwParams {
        lr: config.lr,
        ..AdamwParams::default()
    };
    let order_rng = CounterRng::new(seed).fork_str("order");
    let mut per_epoch = Vec::with_capacity(epochs);
    let inv_temp = 1.0 / config.temperature;

    for epoch in 0..epochs {
        let mut r = order_rng.fork(epoch as u64);
        let mut order: Vec<usize> = train_idx.clone();
        let perm = shuffled(&mut r, order.len());
        order = perm.into_iter().map(|i| order[i]).collect();

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::<f32>::new();
            let bound = model.params.bind(&mut g);
            let mut motion_rows: Option<Value> = None;
            let mut text_rows: Option<Value> = None;
            for &i in chunk {
                let x = g.leaf(&corpus.motions[i].data);
                let m = model.motion_graph(&mut g, &bound, x)?;
                let v = g.leaf(&text_vecs[i]);
                let t = model.text_graph(&mut g, &bound, v)?;
                motion_rows = Some(match motion_rows {
                    Some(acc) => g.concat_rows(acc, m)?,
                    None => m,
                });
                text_rows = Some(match text_rows {
                    Some(acc) => g.concat_rows(acc, t)?,
                    None => t,
                });
            }
            let m = motion_rows.expect("non-empty chunk");
            let t = text_rows.expect("non-empty chunk");
            let tt = g.transpose(t)?;
            let logits = g.matmul(m, tt)?;
            let logits = g.scale(logits, inv_temp)?;

            let b = chunk.len();
            let mut eye = Tensor::zeros(&[b, b]);
            for i in 0..b {
                eye.data_mut()[i * b + i] = 1.0;
            }
            let mask = g.constant(&eye);

            // Cross entropy against the diagonal in both directions. The
            // clamp keeps masked-out log terms finite.
            let direction_loss = |g: &mut Graph<f32>, l: Value| -> Result<Value> {
                let p = g.softmax_rows(l)?;
                let p = g.clamp(p, 1e-12, 1.0)?;
                let lp = g.ln(p)?;
                let diag = g.mul(lp, mask)?;
                let s = g.sum(diag)?;
                g.scale(s, -1.0 / b as f64)
            };
            let l_m2t = direction_loss(&mut g, logits)?;
            let logits_t = g.transpose(logits)?;
            let l_t2m = direction_loss(&mut g, logits_t)?;
            let both = g.add(l_m2t, l_t2m)?;
            let loss = g.scale(both, 0.5)?;

            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "contrastive loss went non-finite".into(),
                });
            }
            let grads = g.backward(loss)?;
            apply_grads(&mut model.params, &bound, &g, &grads, &mut opt, &h)?;
            epoch_loss += value;
            batches += 1;
        }
        per_epoch.push(if batches > 0 {
            epoch_loss / batches as f64
        } else {
            0.0
        });
    }

    let held_motions: Vec<MotionSequence> = held_idx
        .iter()
        .map(|&i| corpus.motions[i].clone())
        .collect();
    let held_texts: Vec<&str> = held_idx.iter().map(|&i| texts[i]).collect();
    let m_feats = model.encode_motions(&held_motions)?;
    let t_feats = model.encode_texts(provider, &held_texts)?;
    let report = DualReport {
        per_epoch,
        holdout_matched: mean_row_distance(&m_feats, &t_feats, 0),
        holdout_mismatched: mean_row_distance(&m_feats, &t_feats, 1),
    };
    Ok((model, report))
}

/// Mean-pooled MLP classifier over action labels, used for the accuracy
/// metric on action-conditioned samples.
#[derive(Debug, Clone)]
pub struct ActionClassifier {
    config: ExtractorConfig,
    feature_dim: usize,
    n_actions: usize,
    params: Params,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl ActionClassifier {
    pub fn init(
        config: ExtractorConfig,
        feature_dim: usize,
        n_actions: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 || n_actions < 2 {
            return Err(Error::Config(
                "classifier needs a positive feature width and at least 2 actions".into(),
            ));
        }
        let mut rng = CounterRng::new(seed).fork_str("clf_init");
        let mut params = Params::new();
        let h = config.hidden;
        let l1 = Linear::init(&mut params, &mut rng, "clf/l1", feature_dim, h, true);
        let l2 = Linear::init(&mut params, &mut rng, "clf/l2", h, h, true);
        let out = Linear::init(&mut params, &mut rng, "clf/out", h, n_actions, true);
        Ok(Self {
            config,
            feature_dim,
            n_actions,
            params,
            l1,
            l2,
            out,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Replace the weights, validating names and shapes.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        replace_params(&mut self.params, params)
    }

    fn logits_graph(&self, g: &mut Graph<f32>, bp: &BoundParams, x: Value) -> Result<Value> {
        let h = frame_mlp(g, bp, &self.l1, &self.l2, x)?;
        self.out.forward(g, bp, h)
    }

    /// Class scores for one motion, as a 1 x n_actions row.
    pub fn logits(&self, seq: &MotionSequence) -> Result<Tensor> {
        if seq.data.cols() != self.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "classifier_logits",
                detail: format!("{} columns vs model {}", seq.data.cols(), self.feature_dim),
            });
        }
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.leaf(&seq.data);
        let out = self.logits_graph(&mut g, &bound, x)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, seq: &MotionSequence) -> Result<usize> {
        let logits = self.logits(seq)?;
        let row = logits.row(0);
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Fraction of motions whose predicted action matches the label.
pub fn action_accuracy(
    clf: &ActionClassifier,
    motions: &[MotionSequence],
    labels: &[usize],
) -> Result<f64> {
    if motions.is_empty() || motions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy needs matched non-empty inputs, got {} motions and {} labels",
            motions.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (m, l) in motions.iter().zip(labels) {
        if clf.predict(m)? == *l {
            hits += 1;
        }
    }
    Ok(hits as f64 / motions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub per_epoch: Vec<f64>,
    pub holdout_accuracy: f64,
}

/// Train an action classifier on a labeled corpus with cross entropy. A
/// quarter of the corpus is held out for the reported accuracy.
pub fn train_classifier(
    corpus: &Corpus,
    config: ExtractorConfig,
    epochs: usize,
    seed: u64,
) -> Result<(ActionClassifier, ClassifierReport)> {
    config.validate()?;
    if corpus.len() < 8 {
        return Err(Error::InvalidArgument(format!(
            "classifier training needs at least 8 sequences, got {}",
            corpus.len()
        )));
    }
    let labels: Vec<usize> = corpus
        .entries
        .iter()
        .map(|e| {
            e.action_id.ok_or_else(|| {
                Error::Config(format!("entry {} has no action label", e.path))
            })
        })
        .collect::<Result<_>>()?;
    let n_actions = labels.iter().max().copied().unwrap_or(0) + 1;
    if n_actions < 2 {
        return Err(Error::Config(
            "classifier training needs at least 2 distinct actions".into(),
        ));
    }
    let feature_dim = corpus.motions[0].data.cols();
    let mut model = ActionClassifier::init(config.clone(), feature_dim, n_actions, seed)?;
    let (train_idx, held_idx) = split_holdout(corpus.len(), seed);

    let mut opt = OptimState::<f32>::new();
    let h = AdamwParams {
        lr: config.lr,
        ..AdamwParams::default()
    };
    let order_rng = CounterRng::new(seed).fork_str("order");
    let mut per_epoch = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut r = order_rng.fork(epoch as u64);
        let mut order: Vec<usize> = train_idx.clone();
        let perm = shuffled(&mut r, order.len());
        order = perm.into_iter().map(|i| order[i]).collect();

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::<f32>::new();
            let bound = model.params.bind(&mut g);
            let mut logit_rows: Option<Value> = None;
            for &i in chunk {
                let x = g.leaf(&corpus.motions[i].data);
                let l = model.logits_graph(&mut g, &bound, x)?;
                logit_rows = Some(match logit_rows {
                    Some(acc) => g.concat_rows(acc, l)?,
                    None => l,
                });
            }
            let logits = logit_rows.expect("non-empty chunk");
            let b = chunk.len();
            let mut onehot = Tensor::zeros(&[b, n_actions]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.data_mut()[r * n_actions + labels[i]] = 1.0;
            }
            let mask = g.constant(&onehot);
            let p = g.softmax_rows(logits)?;
            let p = g.clamp(p, 1e-12, 1.0)?;
            let lp = g.ln(p)?;
            let picked = g.mul(lp, mask)?;
            let s = g.sum(picked)?;
            let loss = g.scale(s, -1.0 / b as f64)?;

            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "classifier loss went non-finite".into(),
                });
            }
            let grads = g.backward(loss)?;
            apply_grads(&mut model.params, &bound, &g, &grads, &mut opt, &h)?;
            epoch_loss += value;
            batches += 1;
        }
        per_epoch.push(if batches > 0 {
            epoch_loss / batches as f64
        } else {
            0.0
        });
    }

    let held_motions: Vec<MotionSequence> = held_idx
        .iter()
        .map(|&i| corpus.motions[i].clone())
        .collect();
    let held_labels: Vec<usize> = held_idx.iter().map(|&i| labels[i]).collect();
    let holdout_accuracy = action_accuracy(&model, &held_motions, &held_labels)?;
    Ok((
        model,
        ClassifierReport {
            per_epoch,
            holdout_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{generate, SynthSpec};

    fn toy_corpus(n_sequences: usize, n_actions: usize, seed: u64) -> Corpus {
        let (entries, motions) = generate(&SynthSpec {
            n_sequences,
            n_actions,
            min_len: 16,
            max_len: 24,
            n_joints: 5,
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        Corpus { entries, motions }
    }

    fn toy_config() -> ExtractorConfig {
        ExtractorConfig {
            hidden: 32,
            out_dim: 16,
            batch_size: 8,
            ..ExtractorConfig::default()
        }
    }

    #[test]
    fn classifier_learns_labels_above_chance() {
        let corpus = toy_corpus(24, 2, 100);
        let (model, report) = train_classifier(&corpus, toy_config(), 30, 7).unwrap();

        assert_eq!(report.per_epoch.len(), 30);
        let first = report.per_epoch[0];
        let last = *report.per_epoch.last().unwrap();
        assert!(last < first, "loss should fall: {first} -> {last}");

        let labels: Vec<usize> = corpus.entries.iter().map(|e| e.action_id.unwrap()).collect();
        let train_acc = action_accuracy(&model, &corpus.motions, &labels).unwrap();
        assert!(train_acc >= 0.75, "train accuracy {train_acc}");
        assert!(report.holdout_accuracy >= 0.5, "holdout {}", report.holdout_accuracy);
    }

    #[test]
    fn permuted_labels_stay_near_chance_on_true_labels() {
        let mut corpus = toy_corpus(24, 4, 101);
        let true_labels: Vec<usize> =
            corpus.entries.iter().map(|e| e.action_id.unwrap()).collect();
        let mut rng = CounterRng::new(5).fork_str("perm");
        for e in corpus.entries.iter_mut() {
            e.action_id = Some(rng.below(4));
        }
        let (model, _) = train_classifier(&corpus, toy_config(), 5, 7).unwrap();
        let acc = action_accuracy(&model, &corpus.motions, &true_labels).unwrap();
        assert!(
            acc < 0.55,
            "random labels should not recover true structure, got {acc}"
        );
    }

    #[test]
    fn classifier_rejects_degenerate_corpora() {
        let corpus = toy_corpus(4, 2, 102);
        assert!(train_classifier(&corpus, toy_config(), 1, 0).is_err());

        let mut unlabeled = toy_corpus(12, 2, 103);
        for e in unlabeled.entries.iter_mut() {
            e.action_id = None;
        }
        assert!(train_classifier(&unlabeled, toy_config(), 1, 0).is_err());

        assert!(ActionClassifier::init(toy_config(), 10, 1, 0).is_err());
    }

    #[test]
    fn dual_encoder_pulls_matched_pairs_together() {
        let corpus = toy_corpus(16, 2, 104);
        let provider = TextEmbedProvider::hash(3, 24).unwrap();
        let (model, report) =
            train_dual_encoder(&corpus, &provider, toy_config(), 40, 9).unwrap();

        let first = report.per_epoch[0];
        let last = *report.per_epoch.last().unwrap();
        assert!(last < first, "loss should fall: {first} -> {last}");
        assert!(
            report.holdout_matched < report.holdout_mismatched,
            "matched {} vs mismatched {}",
            report.holdout_matched,
            report.holdout_mismatched
        );

        // Feature rows are unit length.
        let feats = model.encode_motions(&corpus.motions[..4]).unwrap();
        for r in 0..4 {
            let norm: f64 = feats.row(r).iter().map(|v| (*v as f64).powi(2)).sum();
            assert!((norm - 1.0).abs() < 1e-3, "row norm {norm}");
        }
    }

    #[test]
    fn dual_encoder_training_is_deterministic() {
        let corpus = toy_corpus(12, 2, 105);
        let provider = TextEmbedProvider::hash(4, 16).unwrap();
        let (a, ra) = train_dual_encoder(&corpus, &provider, toy_config(), 3, 11).unwrap();
        let (b, rb) = train_dual_encoder(&corpus, &provider, toy_config(), 3, 11).unwrap();
        assert_eq!(ra, rb);
        let fa = a.encode_motion(&corpus.motions[0]).unwrap();
        let fb = b.encode_motion(&corpus.motions[0]).unwrap();
        assert_eq!(fa.max_abs_diff(&fb), 0.0);
        let ta = a.encode_text(&provider, "a person performs action 0").unwrap();
        let tb = b.encode_text(&provider, "a person performs action 0").unwrap();
        assert_eq!(ta.max_abs_diff(&tb), 0.0);
    }

    #[test]
    fn dual_encoder_rejects_missing_text_and_size_mismatch() {
        let mut corpus = toy_corpus(12, 2, 106);
        for e in corpus.entries.iter_mut() {
            e.text = None;
        }
        let provider = TextEmbedProvider::hash(5, 16).unwrap();
        assert!(train_dual_encoder(&corpus, &provider, toy_config(), 1, 0).is_err());

        let model = DualEncoder::init(toy_config(), 59, 16, 0).unwrap();
        let other = TextEmbedProvider::hash(5, 8).unwrap();
        assert!(model.encode_text(&other, "hi").is_err());
    }
}
