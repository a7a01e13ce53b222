//! Neural building blocks on top of the autodiff graph: a named parameter
//! registry, linear / layer-norm / attention / feed-forward modules, pre-LN
//! transformer layers with optional cross-attention, and the long-skip stack
//! used by the sequence models.
//!
//! Weights are stored at f32. Forward passes are generic over the scalar
//! type, so the exact same model code can run at f64 for high-precision
//! finite-difference gradient checks.

use std::collections::BTreeMap;

use crate::numerics::{AdamwParams, Gradients, Graph, OptimState, Scalar, Tensor, TensorG, Value};
use crate::rng::CounterRng;
use crate::{Error, Result};

/// Ordered name -> tensor registry for all trainable weights of a model.
/// Names are slash paths like `encoder/layer3/attn/wq`.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate param {name}");
        self.map.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    /// Bind every parameter as a trainable leaf of `g`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> BoundParams {
        let mut vals = BTreeMap::new();
        for (name, t) in &self.map {
            vals.insert(name.clone(), g.param(&t.cast::<T>()));
        }
        BoundParams { vals }
    }

    /// Bind every parameter as a frozen constant (no gradients flow into it).
    pub fn bind_frozen<T: Scalar>(&self, g: &mut Graph<T>) -> BoundParams {
        let mut vals = BTreeMap::new();
        for (name, t) in &self.map {
            vals.insert(name.clone(), g.constant(&t.cast::<T>()));
        }
        BoundParams { vals }
    }
}

/// Leaf handles for one graph, addressed by parameter name.
pub struct BoundParams {
    vals: BTreeMap<String, Value>,
}

impl BoundParams {
    /// Assemble bindings from explicit name/value pairs. Used by gradient
    /// checks that create the leaves themselves.
    pub fn from_named<I>(items: I) -> BoundParams
    where
        I: IntoIterator<Item = (String, Value)>,
    {
        BoundParams {
            vals: items.into_iter().collect(),
        }
    }

    pub fn val(&self, name: &str) -> Result<Value> {
        self.vals
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor {
                name: name.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.vals.iter()
    }
}

/// One AdamW step over every parameter from the gradients of one backward
/// pass. Parameters the loss never touched receive zero gradients (their
/// moments still decay).
pub fn apply_grads(
    params: &mut Params,
    bound: &BoundParams,
    graph: &Graph<f32>,
    grads: &Gradients<f32>,
    opt: &mut OptimState<f32>,
    h: &AdamwParams,
) -> Result<()> {
    opt.begin_step();
    for (name, tensor) in params.map.iter_mut() {
        let v = bound.val(name)?;
        let g = grads.for_param(graph, v);
        opt.update(name, h, tensor, &g)?;
    }
    Ok(())
}

/// One AdamW step from pre-accumulated gradients keyed by parameter name.
/// Missing names get zero gradients.
pub fn apply_grad_map(
    params: &mut Params,
    grads: &BTreeMap<String, Tensor>,
    opt: &mut OptimState<f32>,
    h: &AdamwParams,
) -> Result<()> {
    opt.begin_step();
    for (name, tensor) in params.map.iter_mut() {
        match grads.get(name) {
            Some(g) => opt.update(name, h, tensor, g)?,
            None => {
                let z = Tensor::zeros(tensor.dims());
                opt.update(name, h, tensor, &z)?;
            }
        }
    }
    Ok(())
}

/// Accumulate one backward pass into a name-keyed gradient map, scaled.
pub fn accumulate_grads(
    acc: &mut BTreeMap<String, Tensor>,
    params: &Params,
    bound: &BoundParams,
    graph: &Graph<f32>,
    grads: &Gradients<f32>,
    scale: f32,
) -> Result<()> {
    for (name, _) in params.iter() {
        let v = bound.val(name)?;
        let mut g = grads.for_param(graph, v);
        g.scale_assign(scale);
        match acc.get_mut(name) {
            Some(t) => t.add_assign(&g),
            None => {
                acc.insert(name.clone(), g);
            }
        }
    }
    Ok(())
}

fn xavier(rng: &mut CounterRng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(&[fan_in, fan_out]);
    for v in t.data_mut() {
        *v = ((rng.uniform() * 2.0 - 1.0) * limit) as f32;
    }
    t
}

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: Option<String>,
}

impl Linear {
    pub fn init(
        params: &mut Params,
        rng: &mut CounterRng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Linear {
        let w = format!("{name}/w");
        params.insert(&w, xavier(rng, fan_in, fan_out));
        let b = bias.then(|| {
            let b = format!("{name}/b");
            params.insert(&b, Tensor::zeros(&[fan_out]));
            b
        });
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        x: Value,
    ) -> Result<Value> {
        let y = g.matmul(x, bp.val(&self.w)?)?;
        match &self.b {
            Some(b) => g.add_row(y, bp.val(b)?),
            None => Ok(y),
        }
    }
}

/// Learned per-feature gain and bias around row normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    eps: f64,
}

impl LayerNorm {
    pub fn init(params: &mut Params, name: &str, dim: usize) -> LayerNorm {
        let gamma = format!("{name}/gamma");
        let beta = format!("{name}/beta");
        params.insert(&gamma, Tensor::full(&[dim], 1.0));
        params.insert(&beta, Tensor::zeros(&[dim]));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        x: Value,
    ) -> Result<Value> {
        g.layer_norm(x, bp.val(&self.gamma)?, bp.val(&self.beta)?, self.eps)
    }
}

/// Additive attention mask: 0 for visible keys, -1e9 for masked ones.
pub fn key_padding_mask<T: Scalar>(
    query_rows: usize,
    valid_keys: usize,
    total_keys: usize,
) -> TensorG<T> {
    let mut m = TensorG::zeros(&[query_rows, total_keys]);
    let blocked = T::of_f64(-1e9);
    for r in 0..query_rows {
        for c in valid_keys..total_keys {
            m.data_mut()[r * total_keys + c] = blocked;
        }
    }
    m
}

/// Multi-head scaled dot-product attention. Queries come from `x`, keys and
/// values from `mem` (pass `x` again for self-attention). The optional mask
/// is added to the logits, so padded key slots carry a large negative value.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn init(
        params: &mut Params,
        rng: &mut CounterRng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<MultiHeadAttention> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "attention dim {dim} not divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::init(params, rng, &format!("{name}/wq"), dim, dim, true),
            k: Linear::init(params, rng, &format!("{name}/wk"), dim, dim, true),
            v: Linear::init(params, rng, &format!("{name}/wv"), dim, dim, true),
            o: Linear::init(params, rng, &format!("{name}/wo"), dim, dim, true),
            heads,
            head_dim: dim / heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        x: Value,
        mem: Value,
        mask: Option<&TensorG<T>>,
    ) -> Result<Value> {
        let q = self.q.forward(g, bp, x)?;
        let k = self.k.forward(g, bp, mem)?;
        let v = self.v.forward(g, bp, mem)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mask = mask.map(|m| g.constant(m));

        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let att = g.softmax_rows(scores)?;
            heads.push(g.matmul(att, vh)?);
        }
        let mut cat = heads[0];
        for &h in &heads[1..] {
            cat = g.concat_cols(cat, h)?;
        }
        self.o.forward(g, bp, cat)
    }
}

/// Two-layer position-wise MLP with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn init(
        params: &mut Params,
        rng: &mut CounterRng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> FeedForward {
        FeedForward {
            lin1: Linear::init(params, rng, &format!("{name}/lin1"), dim, hidden, true),
            lin2: Linear::init(params, rng, &format!("{name}/lin2"), hidden, dim, true),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        x: Value,
    ) -> Result<Value> {
        let h = self.lin1.forward(g, bp, x)?;
        let h = g.gelu(h)?;
        self.lin2.forward(g, bp, h)
    }
}

/// Pre-LN transformer layer: self-attention, optional cross-attention over an
/// external memory, then the MLP, each behind a residual.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl TransformerLayer {
    pub fn init(
        params: &mut Params,
        rng: &mut CounterRng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        with_cross: bool,
    ) -> Result<TransformerLayer> {
        let cross = if with_cross {
            Some((
                LayerNorm::init(params, &format!("{name}/ln_cross"), dim),
                MultiHeadAttention::init(params, rng, &format!("{name}/cross"), dim, heads)?,
            ))
        } else {
            None
        };
        Ok(TransformerLayer {
            ln1: LayerNorm::init(params, &format!("{name}/ln1"), dim),
            attn: MultiHeadAttention::init(params, rng, &format!("{name}/attn"), dim, heads)?,
            cross,
            ln2: LayerNorm::init(params, &format!("{name}/ln2"), dim),
            ff: FeedForward::init(params, rng, &format!("{name}/ff"), dim, ff_hidden),
        })
    }

    /// `mem = None` skips the cross-attention sublayer entirely, which keeps
    /// an unconditional pass identical to a layer built without one.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        x: Value,
        self_mask: Option<&TensorG<T>>,
        mem: Option<Value>,
    ) -> Result<Value> {
        let n = self.ln1.forward(g, bp, x)?;
        let a = self.attn.forward(g, bp, n, n, self_mask)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, cross)), Some(mem)) = (&self.cross, mem) {
            let n = ln.forward(g, bp, x)?;
            let a = cross.forward(g, bp, n, mem, None)?;
            x = g.add(x, a)?;
        }
        let n = self.ln2.forward(g, bp, x)?;
        let f = self.ff.forward(g, bp, n)?;
        g.add(x, f)
    }
}

/// Stack of transformer layers with long skip connections: the input to layer
/// `i` in the first half is saved and, at the mirror layer `layers-1-i`,
/// concatenated onto the running activation and projected back to width d.
/// Requires an odd layer count so a single middle layer sits on the fold.
#[derive(Debug, Clone)]
pub struct SkipStack {
    layers: Vec<TransformerLayer>,
    skip_proj: Vec<Linear>,
    final_ln: LayerNorm,
}

impl SkipStack {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut Params,
        rng: &mut CounterRng,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        with_cross: bool,
    ) -> Result<SkipStack> {
        if layers.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "skip stack needs an odd layer count, got {layers}"
            )));
        }
        let mut ls = Vec::with_capacity(layers);
        for i in 0..layers {
            ls.push(TransformerLayer::init(
                params,
                rng,
                &format!("{name}/layer{i}"),
                dim,
                heads,
                ff_hidden,
                with_cross,
            )?);
        }
        let mut skip_proj = Vec::with_capacity(layers / 2);
        for i in 0..layers / 2 {
            skip_proj.push(Linear::init(
                params,
                rng,
                &format!("{name}/skip{i}"),
                2 * dim,
                dim,
                true,
            ));
        }
        Ok(SkipStack {
            layers: ls,
            skip_proj,
            final_ln: LayerNorm::init(params, &format!("{name}/ln_out"), dim),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        mut x: Value,
        self_mask: Option<&TensorG<T>>,
        mem: Option<Value>,
    ) -> Result<Value> {
        let n = self.layers.len();
        let half = n / 2;
        let mut saved: Vec<Value> = Vec::with_capacity(half);
        for (i, layer) in self.layers.iter().enumerate() {
            if i < half {
                saved.push(x);
            } else if i > half {
                let skip = saved.pop().expect("skip stack balanced");
                let cat = g.concat_cols(x, skip)?;
                x = self.skip_proj[n - 1 - i].forward(g, bp, cat)?;
            }
            x = layer.forward(g, bp, x, self_mask, mem)?;
        }
        self.final_ln.forward(g, bp, x)
    }
}

/// Plain pre-LN stack without long skips, used for the `use_skip=false`
/// ablation.
#[derive(Debug, Clone)]
pub struct PlainStack {
    layers: Vec<TransformerLayer>,
    final_ln: LayerNorm,
}

impl PlainStack {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut Params,
        rng: &mut CounterRng,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        with_cross: bool,
    ) -> Result<PlainStack> {
        let mut ls = Vec::with_capacity(layers);
        for i in 0..layers {
            ls.push(TransformerLayer::init(
                params,
                rng,
                &format!("{name}/layer{i}"),
                dim,
                heads,
                ff_hidden,
                with_cross,
            )?);
        }
        Ok(PlainStack {
            layers: ls,
            final_ln: LayerNorm::init(params, &format!("{name}/ln_out"), dim),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        mut x: Value,
        self_mask: Option<&TensorG<T>>,
        mem: Option<Value>,
    ) -> Result<Value> {
        for layer in &self.layers {
            x = layer.forward(g, bp, x, self_mask, mem)?;
        }
        self.final_ln.forward(g, bp, x)
    }
}

/// Transformer backbone with the long-skip topology as a switch. The two
/// variants differ exactly by the skip projection parameters.
#[derive(Debug, Clone)]
pub enum Backbone {
    Skip(SkipStack),
    Plain(PlainStack),
}

impl Backbone {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut Params,
        rng: &mut CounterRng,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        with_cross: bool,
        use_skip: bool,
    ) -> Result<Backbone> {
        if use_skip {
            Ok(Backbone::Skip(SkipStack::init(
                params, rng, name, layers, dim, heads, ff_hidden, with_cross,
            )?))
        } else {
            Ok(Backbone::Plain(PlainStack::init(
                params, rng, name, layers, dim, heads, ff_hidden, with_cross,
            )?))
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        x: Value,
        self_mask: Option<&TensorG<T>>,
        mem: Option<Value>,
    ) -> Result<Value> {
        match self {
            Backbone::Skip(s) => s.forward(g, bp, x, self_mask, mem),
            Backbone::Plain(s) => s.forward(g, bp, x, self_mask, mem),
        }
    }
}

/// Sinusoidal position table, `len x dim` with interleaved sin/cos pairs.
pub fn sinusoidal_pe<T: Scalar>(len: usize, dim: usize) -> TensorG<T> {
    debug_assert!(dim.is_multiple_of(2), "positional dim must be even");
    let mut t = TensorG::zeros(&[len, dim]);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * rate;
            t.data_mut()[pos * dim + 2 * i] = T::of_f64(angle.sin());
            t.data_mut()[pos * dim + 2 * i + 1] = T::of_f64(angle.cos());
        }
    }
    t
}

/// Sinusoidal embedding of a diffusion timestep index, shape `1 x dim`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> TensorG<T> {
    let mut out = TensorG::zeros(&[1, dim]);
    for i in 0..dim / 2 {
        let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = t as f64 * rate;
        out.data_mut()[2 * i] = T::of_f64(angle.sin());
        out.data_mut()[2 * i + 1] = T::of_f64(angle.cos());
    }
    out
}
