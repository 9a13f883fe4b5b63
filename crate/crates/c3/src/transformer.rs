//! Decoder-only transformer blocks: causal self-attention with rotary
//! position embeddings, SiLU-gated MLP, pre-norm residuals with RMS norm.
//!
//! Two forward routes exist on purpose. Training runs through the autodiff
//! [`Graph`]; generation runs through a no-grad incremental path with a
//! [`KVCache`]. Their agreement is asserted by tests rather than shared code.

use crate::error::{Error, Result};
use crate::graph::{rope_apply, Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_into, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_eps() -> f64 {
    1e-6
}

impl TransformerConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_head() % 2 != 0 {
            return Err(Error::Config(format!(
                "rope requires even d_head, got {}",
                self.d_head()
            )));
        }
        if self.n_layers == 0 || self.d_mlp == 0 || self.vocab == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("zero-sized transformer dimension".into()));
        }
        Ok(())
    }

    /// Parameter count for one model with these dimensions (untied head).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 3 * d * self.d_mlp + 2 * d;
        self.vocab * d + self.n_layers * per_layer + d + d * self.vocab
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

/// Parameter handles for one transformer; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    pub config: TransformerConfig,
    pub embedding: ParamId,
    pub layers: Vec<LayerWeights>,
    pub final_norm: ParamId,
    pub head: ParamId,
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng>(
    rng: &mut R,
    shape: Vec<usize>,
    std: f64,
) -> Tensor<T> {
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| <T as Scalar>::of(normal.sample(rng))).collect(),
    )
}

impl TransformerWeights {
    /// Fresh GPT-style init: normal(0, 0.02) projections and embeddings,
    /// norm gains at 1.
    pub fn init<T: Scalar, R: Rng>(
        config: TransformerConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 0.02;
        let ones = Tensor::new(vec![d], vec![T::one(); d]);
        let embedding = store.add(
            format!("{prefix}.embedding"),
            normal_tensor(rng, vec![config.vocab, d], std),
        );
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: store.add(format!("{prefix}.layer{l}.attn_norm"), ones.clone()),
                wq: store.add(
                    format!("{prefix}.layer{l}.wq"),
                    normal_tensor(rng, vec![d, d], std),
                ),
                wk: store.add(
                    format!("{prefix}.layer{l}.wk"),
                    normal_tensor(rng, vec![d, d], std),
                ),
                wv: store.add(
                    format!("{prefix}.layer{l}.wv"),
                    normal_tensor(rng, vec![d, d], std),
                ),
                wo: store.add(
                    format!("{prefix}.layer{l}.wo"),
                    normal_tensor(rng, vec![d, d], std),
                ),
                mlp_norm: store.add(format!("{prefix}.layer{l}.mlp_norm"), ones.clone()),
                w_gate: store.add(
                    format!("{prefix}.layer{l}.w_gate"),
                    normal_tensor(rng, vec![d, config.d_mlp], std),
                ),
                w_up: store.add(
                    format!("{prefix}.layer{l}.w_up"),
                    normal_tensor(rng, vec![d, config.d_mlp], std),
                ),
                w_down: store.add(
                    format!("{prefix}.layer{l}.w_down"),
                    normal_tensor(rng, vec![config.d_mlp, d], std),
                ),
            });
        }
        let final_norm = store.add(format!("{prefix}.final_norm"), ones);
        let head = store.add(
            format!("{prefix}.head"),
            normal_tensor(rng, vec![d, config.vocab], std),
        );
        Ok(TransformerWeights {
            config,
            embedding,
            layers,
            final_norm,
            head,
        })
    }

    /// Parameter ids in a stable order (used by checkpointing and AdamW).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        for l in &self.layers {
            ids.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w_gate, l.w_up, l.w_down,
            ]);
        }
        ids.push(self.final_norm);
        ids.push(self.head);
        ids
    }
}

fn check_positions(positions: &[usize], rows: usize, max_seq_len: usize) -> Result<()> {
    if positions.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "forward positions",
            left: vec![rows],
            right: vec![positions.len()],
        });
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("positions must be strictly increasing".into()));
    }
    if let Some(&last) = positions.last() {
        if last >= max_seq_len {
            return Err(Error::SequenceTooLong {
                len: last + 1,
                max: max_seq_len,
            });
        }
    }
    Ok(())
}

/// Causal self-attention forward on the autodiff graph. Input is given as
/// embedding rows so latent vectors can be injected mid-sequence. Returns the
/// final-layer hidden states (pre final-norm); logits are a separate step via
/// [`logits_graph`].
pub fn forward_graph<T: Scalar>(
    w: &TransformerWeights,
    g: &mut Graph<T>,
    input_rows: NodeId,
    positions: &[usize],
) -> Result<NodeId> {
    let cfg = &w.config;
    let (t, d) = g.value(input_rows).dims2();
    if d != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "forward input width",
            left: vec![t, d],
            right: vec![cfg.d_model],
        });
    }
    check_positions(positions, t, cfg.max_seq_len)?;
    let d_head = cfg.d_head();
    let scale = <T as Scalar>::of(1.0 / (d_head as f64).sqrt());

    // Shared causal mask: 0 where key position <= query position, else -1e30.
    let mut mask = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in 0..t {
            if j > i {
                mask.data_mut()[i * t + j] = <T as Scalar>::of(-1e30);
            }
        }
    }
    let mask = g.input(mask);

    let mut x = input_rows;
    for layer in &w.layers {
        // attention sublayer
        let norm_gain = g.param(layer.attn_norm);
        let y = g.rms_norm(x, norm_gain, <T as Scalar>::of(cfg.eps))?;
        let wq = g.param(layer.wq);
        let wk = g.param(layer.wk);
        let wv = g.param(layer.wv);
        let q = g.matmul(y, wq)?;
        let k = g.matmul(y, wk)?;
        let v = g.matmul(y, wv)?;
        let q = g.rope(q, d_head, positions, cfg.rope_base)?;
        let k = g.rope(k, d_head, positions, cfg.rope_base)?;

        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = g.slice_cols(q, h * d_head, d_head);
            let kh = g.slice_cols(k, h * d_head, d_head);
            let vh = g.slice_cols(v, h * d_head, d_head);
            let scores = g.matmul_t(qh, false, kh, true)?;
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, mask)?;
            let probs = g.softmax(scores);
            head_outs.push(g.matmul(probs, vh)?);
        }
        let attn = g.concat_cols(&head_outs);
        let wo = g.param(layer.wo);
        let attn = g.matmul(attn, wo)?;
        x = g.add(x, attn)?;

        // gated MLP sublayer
        let norm_gain = g.param(layer.mlp_norm);
        let y = g.rms_norm(x, norm_gain, <T as Scalar>::of(cfg.eps))?;
        let wg = g.param(layer.w_gate);
        let wu = g.param(layer.w_up);
        let wd = g.param(layer.w_down);
        let gate = g.matmul(y, wg)?;
        let gate = g.silu(gate);
        let up = g.matmul(y, wu)?;
        let prod = g.mul(gate, up)?;
        let mlp = g.matmul(prod, wd)?;
        x = g.add(x, mlp)?;
    }
    Ok(x)
}

/// hidden -> final RMS norm -> output head.
pub fn logits_graph<T: Scalar>(
    w: &TransformerWeights,
    g: &mut Graph<T>,
    hidden: NodeId,
) -> Result<NodeId> {
    let gain = g.param(w.final_norm);
    let y = g.rms_norm(hidden, gain, <T as Scalar>::of(w.config.eps))?;
    let head = g.param(w.head);
    g.matmul(y, head)
}

/// Convenience no-grad full forward: returns (hidden, logits) tensors.
pub fn forward_full<T: Scalar>(
    store: &ParamStore<T>,
    w: &TransformerWeights,
    input_rows: &Tensor<T>,
    positions: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new(store);
    let rows = g.input(input_rows.clone());
    let hidden = forward_graph(w, &mut g, rows, positions)?;
    let logits = logits_graph(w, &mut g, hidden)?;
    Ok((g.value(hidden).clone(), g.value(logits).clone()))
}

/// Per-layer cached key/value rows for incremental decoding.
#[derive(Debug, Clone)]
pub struct KVCache<T: Scalar> {
    layers: Vec<LayerKV<T>>,
    len: usize,
}

#[derive(Debug, Clone)]
struct LayerKV<T: Scalar> {
    k: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(n_layers: usize) -> Self {
        KVCache {
            layers: (0..n_layers)
                .map(|_| LayerKV {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
            len: 0,
        }
    }

    /// Number of positions fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], eps: f64, d: usize, out: &mut [T]) {
    let dn = <T as Scalar>::of(d as f64);
    let eps = <T as Scalar>::of(eps);
    for (xr, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = xr.iter().fold(T::zero(), |s, &v| s + v * v) / dn;
        let inv = T::one() / (ms + eps).sqrt();
        for j in 0..d {
            orow[j] = xr[j] * inv * gain[j];
        }
    }
}

/// Incremental forward over new embedding rows starting at `start_position`.
/// The cache must already hold exactly the prefix [0, start_position).
/// Returns logits for the new rows.
pub fn forward_incremental<T: Scalar>(
    store: &ParamStore<T>,
    w: &TransformerWeights,
    cache: &mut KVCache<T>,
    new_rows: &Tensor<T>,
    start_position: usize,
) -> Result<Tensor<T>> {
    let cfg = &w.config;
    let d = cfg.d_model;
    let (n, dm) = if new_rows.is_empty() {
        (0, d)
    } else {
        new_rows.dims2()
    };
    if dm != d {
        return Err(Error::ShapeMismatch {
            op: "forward_incremental input width",
            left: vec![n, dm],
            right: vec![d],
        });
    }
    if start_position != cache.len {
        return Err(Error::Config(format!(
            "cache holds prefix of length {}, cannot feed rows starting at {start_position}",
            cache.len
        )));
    }
    if n == 0 {
        return Ok(Tensor::zeros(vec![0, cfg.vocab]));
    }
    if start_position + n > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: start_position + n,
            max: cfg.max_seq_len,
        });
    }
    let d_head = cfg.d_head();
    let n_heads = cfg.n_heads;
    let positions: Vec<usize> = (start_position..start_position + n).collect();
    let inv_sqrt = <T as Scalar>::of(1.0 / (d_head as f64).sqrt());

    let mut x = new_rows.data().to_vec();
    let mut normed = vec![T::zero(); n * d];
    for (layer, kv) in w.layers.iter().zip(cache.layers.iter_mut()) {
        rms_norm_rows(&x, store.get(layer.attn_norm).data(), cfg.eps, d, &mut normed);
        let y = Tensor::new(vec![n, d], normed.clone());
        let mut q = matmul_into(&y, false, store.get(layer.wq), false, "wq")?;
        let mut k = matmul_into(&y, false, store.get(layer.wk), false, "wk")?;
        let v = matmul_into(&y, false, store.get(layer.wv), false, "wv")?;
        rope_apply(q.data_mut(), n, d, d_head, &positions, cfg.rope_base, false);
        rope_apply(k.data_mut(), n, d, d_head, &positions, cfg.rope_base, false);
        kv.k.extend_from_slice(k.data());
        kv.v.extend_from_slice(v.data());

        // attention over the cached prefix, row by row
        let mut attn = vec![T::zero(); n * d];
        for i in 0..n {
            let ctx = start_position + i + 1; // causal: keys at positions <= i
            for h in 0..n_heads {
                let qrow = &q.data()[i * d + h * d_head..i * d + (h + 1) * d_head];
                let mut scores: Vec<T> = (0..ctx)
                    .map(|p| {
                        let krow = &kv.k[p * d + h * d_head..p * d + (h + 1) * d_head];
                        qrow.iter()
                            .zip(krow)
                            .fold(T::zero(), |s, (&a, &b)| s + a * b)
                            * inv_sqrt
                    })
                    .collect();
                let max = scores.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                }
                let out = &mut attn[i * d + h * d_head..i * d + (h + 1) * d_head];
                for (p, &s) in scores.iter().enumerate() {
                    let wgt = s / sum;
                    let vrow = &kv.v[p * d + h * d_head..p * d + (h + 1) * d_head];
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o = *o + wgt * vv;
                    }
                }
            }
        }
        let attn = matmul_into(
            &Tensor::new(vec![n, d], attn),
            false,
            store.get(layer.wo),
            false,
            "wo",
        )?;
        for (xv, &a) in x.iter_mut().zip(attn.data()) {
            *xv = *xv + a;
        }

        rms_norm_rows(&x, store.get(layer.mlp_norm).data(), cfg.eps, d, &mut normed);
        let y = Tensor::new(vec![n, d], normed.clone());
        let mut gate = matmul_into(&y, false, store.get(layer.w_gate), false, "w_gate")?;
        let up = matmul_into(&y, false, store.get(layer.w_up), false, "w_up")?;
        for (gv, &u) in gate.data_mut().iter_mut().zip(up.data()) {
            let s = T::one() / (T::one() + (-*gv).exp());
            *gv = *gv * s * u;
        }
        let mlp = matmul_into(&gate, false, store.get(layer.w_down), false, "w_down")?;
        for (xv, &m) in x.iter_mut().zip(mlp.data()) {
            *xv = *xv + m;
        }
    }
    cache.len += n;

    rms_norm_rows(&x, store.get(w.final_norm).data(), cfg.eps, d, &mut normed);
    matmul_into(
        &Tensor::new(vec![n, d], normed.clone()),
        false,
        store.get(w.head),
        false,
        "head",
    )
}

/// Standalone rotary rotation of head vectors at one position
/// (pairwise rotation by position / base^(2j/d_head)).
pub fn rope_rotate<T: Scalar>(vecs: &mut Tensor<T>, position: usize, base: f64) -> Result<()> {
    let (rows, cols) = vecs.rows_cols();
    if cols % 2 != 0 {
        return Err(Error::Config(format!("rope requires even d_head, got {cols}")));
    }
    let positions = vec![position; rows];
    // each row is one head vector
    for r in 0..rows {
        rope_apply(
            &mut vecs.data_mut()[r * cols..(r + 1) * cols],
            1,
            cols,
            cols,
            &positions[r..=r],
            base,
            false,
        );
    }
    Ok(())
}
