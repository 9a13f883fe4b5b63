//! AdamW with decoupled weight decay, linear-warmup + cosine-decay schedule,
//! gradient accumulation, and deterministic "C3CK" checkpointing.

use crate::cascade::{CascadeConfig, CascadeModel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{GradBuffers, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
    pub batch_per_step: usize,
    pub accumulation_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Stop early once the per-step loss drops below this (overfit runs).
    pub early_stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Scaled-down recipe for randomly initialized desk models.
    pub fn desk() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            warmup_steps: 100,
            total_steps: 5_000,
            min_lr: 0.0,
            batch_per_step: 2,
            accumulation_steps: 16, // effective batch 32
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every: 500,
            early_stop_loss: None,
        }
    }

    /// The original large-scale recipe, kept verbatim as a named preset.
    pub fn paper() -> Self {
        TrainConfig {
            peak_lr: 1e-5,
            warmup_steps: 100,
            total_steps: 40_000,
            min_lr: 0.0,
            batch_per_step: 16,
            accumulation_steps: 16, // effective batch 256
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.peak_lr <= 0.0 || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return Err(Error::Config("require 0 <= min_lr <= peak_lr, peak_lr > 0".into()));
        }
        if self.batch_per_step == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("batch_per_step and accumulation_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_per_step * self.accumulation_steps
    }
}

/// Linear warmup to peak_lr, then cosine decay to min_lr; clamps past the end.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return cfg.min_lr;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let t = (step - cfg.warmup_steps) as f64 / span;
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moment accumulators, shaped like the parameter store.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub t: u64,
    pub m: GradBuffers<T>,
    pub v: GradBuffers<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        AdamState {
            t: 0,
            m: GradBuffers::zeros_like(store),
            v: GradBuffers::zeros_like(store),
        }
    }
}

/// One AdamW update over every parameter in the store. Weight decay is
/// decoupled and applied before the Adam delta: p <- p * (1 - lr * wd).
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &GradBuffers<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some(name) = grads.find_non_finite(store) {
        return Err(Error::NonFiniteGrad(name));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::of(1.0);
    let eps = T::of(cfg.eps);
    let lr_t = T::of(lr);
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let m = state.m.get_mut(id);
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + (one - b1) * gi;
        }
        let v = state.v.get_mut(id);
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + (one - b2) * gi * gi;
        }
        let p = store.get_mut(id);
        let m = state.m.get(id);
        let v = state.v.get(id);
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi = *pi * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Full optimizer state needed for bit-exact resumption.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub adam: AdamState<f32>,
    pub rng: ChaCha8Rng,
    rng_seed: u64,
}

impl TrainState {
    pub fn new(store: &ParamStore<f32>, seed: u64) -> Self {
        TrainState {
            step: 0,
            adam: AdamState::new(store),
            rng: ChaCha8Rng::seed_from_u64(seed),
            rng_seed: seed,
        }
    }
}

/// One emitted loss-curve row (`step,lr,loss`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_curve(rows: &[CurveRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Run the training loop from `state.step` to `cfg.total_steps` (or early
/// stop). Gradients are the mean over `accumulation_steps` micro-batches of
/// `batch_per_step` documents, each micro-batch pooled over masked positions.
/// When `out_dir` is set, checkpoints and `loss.csv` are written there.
pub fn train(
    model: &mut CascadeModel<f32>,
    docs: &[TokenSequence],
    cfg: &TrainConfig,
    state: &mut TrainState,
    out_dir: Option<&Path>,
) -> Result<Vec<CurveRow>> {
    train_until(model, docs, cfg, state, out_dir, cfg.total_steps)
}

/// `train`, but stopping after `until_step` optimizer steps while keeping the
/// full-length schedule. Used for interrupt/resume.
pub fn train_until(
    model: &mut CascadeModel<f32>,
    docs: &[TokenSequence],
    cfg: &TrainConfig,
    state: &mut TrainState,
    out_dir: Option<&Path>,
    until_step: u64,
) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    let until_step = until_step.min(cfg.total_steps);
    if docs.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty"));
    }
    let max = model.config.max_text_len();
    for d in docs {
        if d.len() > max {
            return Err(Error::SequenceTooLong { len: d.len(), max });
        }
        if d.is_empty() {
            return Err(Error::EmptyInput("training corpus contains an empty document"));
        }
    }

    let mut curve = Vec::new();
    let mut grads = GradBuffers::zeros_like(&model.store);
    while state.step < until_step {
        let step = state.step + 1;
        let lr = lr_schedule(step, cfg);
        grads.zero();
        let mut step_loss = 0.0f64;
        for _ in 0..cfg.accumulation_steps {
            let batch: Vec<&TokenSequence> = (0..cfg.batch_per_step)
                .map(|_| &docs[state.rng.gen_range(0..docs.len())])
                .collect();
            // pooled mean over masked positions across the micro-batch
            let total: usize = batch.iter().map(|d| d.len() + 1).sum();
            let mut micro_loss = 0.0f64;
            for doc in batch {
                let mut g = Graph::new(&model.store);
                let loss = model.reconstruction_loss_graph(&mut g, doc)?;
                let weight = (doc.len() + 1) as f64 / total as f64;
                micro_loss += g.value(loss).item().as_f64() * weight;
                let node_grads = g.backward(loss);
                node_grads
                    .accumulate_into(&mut grads, (weight / cfg.accumulation_steps as f64) as f32);
            }
            step_loss += micro_loss / cfg.accumulation_steps as f64;
        }
        if !step_loss.is_finite() {
            return Err(Error::Diverged(step));
        }
        adamw_step(&mut model.store, &grads, &mut state.adam, lr, cfg)?;
        state.step = step;
        curve.push(CurveRow {
            step,
            lr,
            loss: step_loss,
        });
        if let Some(dir) = out_dir {
            if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
                save_checkpoint(model, cfg, state, &dir.join("checkpoint.bin"))?;
                write_loss_curve(&curve, &dir.join("loss.csv"))?;
            }
        }
        if let Some(target) = cfg.early_stop_loss {
            if step_loss < target {
                break;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(model, cfg, state, &dir.join("checkpoint.bin"))?;
        write_loss_curve(&curve, &dir.join("loss.csv"))?;
    }
    Ok(curve)
}

// ---- checkpoint format -----------------------------------------------------
//
// magic "C3CK" | u32 LE version | u64 LE header length | UTF-8 JSON header |
// tensor records: u32 LE name length, name, u8 dtype (0 = f32), u8 ndim,
// ndim x u64 LE dims, raw little-endian row-major data.

const MAGIC: &[u8; 4] = b"C3CK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    cascade: CascadeConfig,
    train: TrainConfig,
    step: u64,
    adam_t: u64,
    rng_seed: u64,
    rng_word_pos: u128,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

/// Atomically write model + optimizer state (temp file, then rename).
pub fn save_checkpoint(
    model: &CascadeModel<f32>,
    cfg: &TrainConfig,
    state: &TrainState,
    path: &Path,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let err = |e| Error::io(tmp.display().to_string(), e);
    let file = std::fs::File::create(&tmp).map_err(err)?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader {
        cascade: model.config.clone(),
        train: cfg.clone(),
        step: state.step,
        adam_t: state.adam.t,
        rng_seed: state.rng_seed,
        rng_word_pos: state.rng.get_word_pos(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(MAGIC).map_err(err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(err)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(err)?;
    w.write_all(&header).map_err(err)?;
    let mut write_tensor = |name: &str, t: &Tensor<f32>| -> std::io::Result<()> {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32, t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for (id, name, value) in model.store.iter() {
        write_tensor(name, value).map_err(err)?;
        write_tensor(&format!("adam.m.{name}"), state.adam.m.get(id)).map_err(err)?;
        write_tensor(&format!("adam.v.{name}"), state.adam.v.get(id)).map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| Error::io(tmp.display().to_string(), e.into_error()))?
        .sync_all()
        .map_err(err)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a checkpoint written by `save_checkpoint`, bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<(CascadeModel<f32>, TrainConfig, TrainState)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(fmt_err(format!("bad magic bytes {magic:?}, expected \"C3CK\"")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported format version {version}")));
    }
    let header_len = read_u64(&mut r, "header length")? as usize;
    let mut header = vec![0u8; header_len];
    read_exact(&mut r, &mut header, "JSON header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header).map_err(|e| fmt_err(format!("bad JSON header: {e}")))?;

    let mut model = CascadeModel::<f32>::init(header.cascade, 0)?;
    let mut state = TrainState::new(&model.store, header.rng_seed);
    state.step = header.step;
    state.adam.t = header.adam_t;
    state.rng.set_word_pos(header.rng_word_pos);

    let names: std::collections::HashMap<String, _> = model
        .store
        .iter()
        .map(|(id, name, _)| (name.to_string(), id))
        .collect();
    let mut seen = 0usize;
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4) {
            Ok(0) => break,
            Ok(4) => {}
            Ok(_) => return Err(Error::CheckpointTruncated("tensor name length".into())),
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| fmt_err("non-UTF-8 tensor name"))?;
        let mut tag = [0u8; 2];
        read_exact(&mut r, &mut tag, "dtype/ndim")?;
        if tag[0] != DTYPE_F32 {
            return Err(fmt_err(format!("unknown dtype tag {} for `{name}`", tag[0])));
        }
        let mut dims = Vec::with_capacity(tag[1] as usize);
        for _ in 0..tag[1] {
            dims.push(read_u64(&mut r, "tensor dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(&mut r, &mut raw, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let (bare, dest) = if let Some(rest) = name.strip_prefix("adam.m.") {
            (rest.to_string(), 1u8)
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            (rest.to_string(), 2)
        } else {
            (name.clone(), 0)
        };
        let id = *names
            .get(&bare)
            .ok_or_else(|| fmt_err(format!("unknown tensor `{name}` for this config")))?;
        let target = match dest {
            0 => model.store.get_mut(id),
            1 => state.adam.m.get_mut(id),
            _ => state.adam.v.get_mut(id),
        };
        if target.shape() != dims.as_slice() {
            return Err(Error::CheckpointShape {
                name,
                file: dims,
                expected: target.shape().to_vec(),
            });
        }
        *target = Tensor::new(dims, data);
        seen += 1;
    }
    let expected = model.store.len() * 3;
    if seen != expected {
        return Err(Error::CheckpointTruncated(format!(
            "found {seen} tensor records, expected {expected}"
        )));
    }
    Ok((model, header.train, state))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CheckpointTruncated(what.to_string())
        } else {
            Error::io("checkpoint", e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::VOCAB_SIZE;
    use crate::transformer::TransformerConfig;

    fn tiny_model(seed: u64) -> CascadeModel<f32> {
        let cfg = CascadeConfig {
            encoder: TransformerConfig {
                n_layers: 1,
                d_model: 8,
                n_heads: 2,
                d_mlp: 16,
                vocab: VOCAB_SIZE,
                max_seq_len: 128,
                rope_base: 10000.0,
                eps: 1e-6,
            },
            decoder: TransformerConfig {
                n_layers: 1,
                d_model: 12,
                n_heads: 2,
                d_mlp: 24,
                vocab: VOCAB_SIZE,
                max_seq_len: 160,
                rope_base: 10000.0,
                eps: 1e-6,
            },
            latent_tokens: 2,
            prompt: crate::tokenizer::prompt_tokens(),
        };
        CascadeModel::init(cfg, seed).unwrap()
    }

    fn tiny_train_cfg(total: u64) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            warmup_steps: 2.min(total.saturating_sub(1)),
            batch_per_step: 2,
            accumulation_steps: 2,
            checkpoint_every: 4,
            ..TrainConfig::desk()
        }
    }

    fn tiny_docs() -> Vec<TokenSequence> {
        ["hello there", "byte pairs", "one two three", "zzz"]
            .iter()
            .map(|s| s.bytes().map(|b| b as usize).collect())
            .collect()
    }

    #[test]
    fn schedule_hits_pinned_points() {
        let cfg = TrainConfig {
            peak_lr: 1e-5,
            warmup_steps: 100,
            total_steps: 40_000,
            min_lr: 0.0,
            ..TrainConfig::desk()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(100, &cfg), 1e-5);
        assert!(lr_schedule(40_000, &cfg).abs() < 1e-20);
        assert_eq!(lr_schedule(50_000, &cfg), 0.0); // clamp past the end
    }

    #[test]
    fn schedule_is_continuous_and_monotone_after_warmup() {
        let cfg = TrainConfig {
            peak_lr: 3e-4,
            warmup_steps: 7,
            total_steps: 500,
            min_lr: 1e-6,
            ..TrainConfig::desk()
        };
        let at_warmup = lr_schedule(7, &cfg);
        assert!((at_warmup - cfg.peak_lr).abs() < 1e-18);
        let mut prev = at_warmup;
        for s in 8..=500 {
            let lr = lr_schedule(s, &cfg);
            assert!(lr <= prev + 1e-18, "not monotone at step {s}");
            prev = lr;
        }
        assert!((lr_schedule(500, &cfg) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn adamw_zero_grads_zero_moments_no_decay_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let grads = GradBuffers::zeros_like(&store);
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::desk()
        };
        adamw_step(&mut store, &grads, &mut state, 0.01, &cfg).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn adamw_zero_grads_applies_pure_decay() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::new(vec![2], vec![4.0, -8.0]));
        let grads = GradBuffers::zeros_like(&store);
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::desk()
        };
        adamw_step(&mut store, &grads, &mut state, 0.01, &cfg).unwrap();
        // p' = (1 - 0.01 * 0.1) p = 0.999 p
        assert_eq!(store.get(id).data(), &[0.999 * 4.0, 0.999 * -8.0]);
    }

    #[test]
    fn adamw_rejects_nan_grads_naming_the_parameter() {
        let mut store = ParamStore::<f32>::new();
        store.add("alpha", Tensor::zeros(vec![2]));
        let beta = store.add("beta", Tensor::zeros(vec![2]));
        let mut grads = GradBuffers::zeros_like(&store);
        grads.get_mut(beta).data_mut()[1] = f32::NAN;
        let mut state = AdamState::new(&store);
        let err = adamw_step(&mut store, &grads, &mut state, 0.01, &TrainConfig::desk());
        assert!(err.unwrap_err().to_string().contains("beta"));
    }

    #[test]
    fn adamw_matches_hand_rolled_scalar_oracle() {
        // minimize (p - 3)^2 from p = 0 for 10 steps; compare against an
        // independent recomputation of the textbook update rule in f64.
        let cfg = TrainConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            ..TrainConfig::desk()
        };
        let lr = 0.1;
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::new(vec![1], vec![0.0]));
        let mut state = AdamState::new(&store);

        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=10u32 {
            let g = 2.0 * (p - 3.0);
            let mut grads = GradBuffers::zeros_like(&store);
            grads.get_mut(id).data_mut()[0] = 2.0 * (store.get(id).data()[0] - 3.0);
            adamw_step(&mut store, &grads, &mut state, lr, &cfg).unwrap();

            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32));
            let v_hat = v / (1.0 - 0.999f64.powi(t as i32));
            p = p * (1.0 - lr * 0.01) - lr * m_hat / (v_hat.sqrt() + 1e-8);

            assert!(
                (store.get(id).data()[0] - p).abs() <= 1e-12,
                "diverged from oracle at step {t}"
            );
        }
    }

    #[test]
    fn zero_total_steps_returns_model_unchanged() {
        let mut model = tiny_model(1);
        let before = model.store.get(model.query).data().to_vec();
        let cfg = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..TrainConfig::desk()
        };
        let mut state = TrainState::new(&model.store, cfg.seed);
        let curve = train(&mut model, &tiny_docs(), &cfg, &mut state, None).unwrap();
        assert!(curve.is_empty());
        assert_eq!(model.store.get(model.query).data(), before.as_slice());
    }

    #[test]
    fn fixed_seed_training_is_bitwise_deterministic() {
        let run = || {
            let mut model = tiny_model(3);
            let cfg = tiny_train_cfg(5);
            let mut state = TrainState::new(&model.store, cfg.seed);
            train(&mut model, &tiny_docs(), &cfg, &mut state, None).unwrap();
            model
        };
        let (a, b) = (run(), run());
        for ((_, _, ta), (_, _, tb)) in a.store.iter().zip(b.store.iter()) {
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn accumulated_gradient_equals_single_large_batch() {
        // grads averaged over accumulation steps == pooled grad of the same
        // docs in one batch (equal-length docs make the weightings identical).
        let model = tiny_model(5);
        let eq_docs: Vec<TokenSequence> = (0..4)
            .map(|i| (0..10).map(|j| (i * 10 + j) % 256).collect())
            .collect();
        let mut one_pass = GradBuffers::zeros_like(&model.store);
        for doc in &eq_docs {
            let mut g = Graph::new(&model.store);
            let loss = model.reconstruction_loss_graph(&mut g, doc).unwrap();
            g.backward(loss).accumulate_into(&mut one_pass, 0.25);
        }
        let mut micro = GradBuffers::zeros_like(&model.store);
        for chunk in eq_docs.chunks(2) {
            for doc in chunk {
                let mut g = Graph::new(&model.store);
                let loss = model.reconstruction_loss_graph(&mut g, doc).unwrap();
                g.backward(loss).accumulate_into(&mut micro, 0.5 * 0.5);
            }
        }
        for id in model.store.ids() {
            for (a, b) in one_pass.get(id).data().iter().zip(micro.get(id).data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(7);
        let cfg = tiny_train_cfg(3);
        let mut state = TrainState::new(&model.store, cfg.seed);
        train(&mut model, &tiny_docs(), &cfg, &mut state, None).unwrap();

        let path = dir.path().join("ck.bin");
        save_checkpoint(&model, &cfg, &state, &path).unwrap();
        let (loaded, cfg2, state2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(state2.step, state.step);
        assert_eq!(state2.adam.t, state.adam.t);
        assert_eq!(state2.rng.get_word_pos(), state.rng.get_word_pos());
        for ((_, na, ta), (_, nb, tb)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(na, nb);
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for id in model.store.ids() {
            assert_eq!(state.adam.m.get(id).data(), state2.adam.m.get(id).data());
            assert_eq!(state.adam.v.get(id).data(), state2.adam.v.get(id).data());
        }
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(9);
        let cfg = tiny_train_cfg(3);
        let state = TrainState::new(&model.store, cfg.seed);
        let path = dir.path().join("ck.bin");
        save_checkpoint(&model, &cfg, &state, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointFormat(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(9);
        let cfg = tiny_train_cfg(3);
        let state = TrainState::new(&model.store, cfg.seed);
        let path = dir.path().join("ck.bin");
        save_checkpoint(&model, &cfg, &state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 37]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointTruncated(_)) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn resume_equals_uninterrupted_training() {
        let docs = tiny_docs();
        let cfg = tiny_train_cfg(6);

        let mut full = tiny_model(11);
        let mut full_state = TrainState::new(&full.store, cfg.seed);
        train(&mut full, &docs, &cfg, &mut full_state, None).unwrap();

        let mut half = tiny_model(11);
        let mut half_state = TrainState::new(&half.store, cfg.seed);
        train_until(&mut half, &docs, &cfg, &mut half_state, None, 3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&half, &cfg, &half_state, &path).unwrap();
        let (mut resumed, cfg_loaded, mut resumed_state) = load_checkpoint(&path).unwrap();
        assert_eq!(resumed_state.step, 3);
        train(&mut resumed, &docs, &cfg_loaded, &mut resumed_state, None).unwrap();

        for ((_, _, ta), (_, _, tb)) in full.store.iter().zip(resumed.store.iter()) {
            assert!(
                ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "resumed trajectory diverged"
            );
        }
    }

    #[test]
    fn loss_curve_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            CurveRow { step: 1, lr: 0.5, loss: 2.25 },
            CurveRow { step: 2, lr: 0.25, loss: 2.0 },
        ];
        let path = dir.path().join("loss.csv");
        write_loss_curve(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,lr,loss\n1,0.5,2.25\n2,0.25,2\n");
    }
}
