//! Train a tiny cascade until it echoes a handful of sentences byte-exactly.
//!
//! This is the mechanism demonstration in miniature: each sentence is forced
//! through a 4-vector bottleneck, and after a few hundred optimizer steps the
//! decoder reproduces the exact bytes from the latents alone.
//!
//! Run with: cargo run --release --example overfit_echo

use c3::cascade::{CascadeConfig, CascadeModel};
use c3::tokenizer;
use c3::training::{train, TrainConfig, TrainState};
use c3::transformer::TransformerConfig;

fn main() -> c3::Result<()> {
    let config = CascadeConfig {
        encoder: TransformerConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_mlp: 64,
            vocab: 260,
            max_seq_len: 96,
            rope_base: 10000.0,
            eps: 1e-6,
        },
        decoder: TransformerConfig {
            n_layers: 3,
            d_model: 48,
            n_heads: 2,
            d_mlp: 96,
            vocab: 260,
            max_seq_len: 128,
            rope_base: 10000.0,
            eps: 1e-6,
        },
        latent_tokens: 4,
        prompt: tokenizer::prompt_tokens(),
    };

    let texts = [
        "a stitch in time saves nine",
        "look before you leap",
        "many hands make light work",
    ];
    let docs: Vec<Vec<usize>> = texts.iter().map(|t| tokenizer::encode(t.as_bytes())).collect();

    let cfg = TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 20,
        total_steps: 2000,
        min_lr: 1e-4,
        batch_per_step: 3,
        accumulation_steps: 1,
        early_stop_loss: Some(0.01),
        ..TrainConfig::desk()
    };

    let mut model = CascadeModel::<f32>::init(config, 7)?;
    let mut state = TrainState::new(&model.store, cfg.seed);
    println!("training on {} sentences ...", texts.len());
    let curve = train(&mut model, &docs, &cfg, &mut state, None)?;
    let last = curve.last().unwrap();
    println!("stopped at step {} with loss {:.4}\n", last.step, last.loss);

    for (text, doc) in texts.iter().zip(&docs) {
        let recon = model.reconstruct(doc, 64)?;
        let echoed = String::from_utf8_lossy(&tokenizer::decode(&recon.tokens)?).into_owned();
        let mark = if echoed == *text { "exact" } else { "DIFFERS" };
        println!("[{mark}] {echoed}");
    }
    Ok(())
}
