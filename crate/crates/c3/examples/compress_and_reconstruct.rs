//! Encode a text into a fixed set of latent vectors and decode it back.
//!
//! The model here is freshly initialized, so the reconstruction is noise —
//! the point is the shape contract: whatever the input length, the encoder
//! emits exactly `latent_tokens` vectors of width `d_model`, and the decoder
//! consumes only those vectors (plus the fixed prompt) to regenerate text.
//!
//! Run with: cargo run --release --example compress_and_reconstruct

use c3::cascade::{CascadeConfig, CascadeModel};
use c3::tokenizer;
use c3::transformer::TransformerConfig;

fn main() -> c3::Result<()> {
    let config = CascadeConfig {
        encoder: TransformerConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_mlp: 64,
            vocab: 260,
            max_seq_len: 256,
            rope_base: 10000.0,
            eps: 1e-6,
        },
        decoder: TransformerConfig {
            n_layers: 3,
            d_model: 48,
            n_heads: 2,
            d_mlp: 96,
            vocab: 260,
            max_seq_len: 320,
            rope_base: 10000.0,
            eps: 1e-6,
        },
        latent_tokens: 4,
        prompt: tokenizer::prompt_tokens(),
    };
    let model = CascadeModel::<f32>::init(config, 42)?;

    for text in [
        "hi",
        "the quick brown fox jumps over the lazy dog",
        &"lorem ipsum dolor sit amet ".repeat(8),
    ] {
        let tokens = tokenizer::encode(text.as_bytes());
        let latent = model.encode(&tokens)?;
        let projected = model.project(&latent)?;
        let recon = model.reconstruct(&tokens, 64)?;
        // untrained models emit arbitrary tokens; keep only plain bytes
        let byte_count = recon.tokens.iter().filter(|&&t| t < 256).count();
        println!(
            "input {:3} bytes -> latent {:?} -> projected {:?} -> decoded {:3} byte tokens ({})",
            text.len(),
            latent.shape(),
            projected.shape(),
            byte_count,
            if recon.truncated { "hit budget" } else { "emitted end-of-text" },
        );
    }
    println!("\nAn untrained decoder babbles; see overfit_echo for a trained one.");
    Ok(())
}
