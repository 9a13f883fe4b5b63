//! Verify analytic gradients of the reconstruction loss with central finite
//! differences in 64-bit mode, for a couple of representative parameters.
//!
//! The full every-parameter check lives in the acceptance test suite; this
//! example shows the technique on the context query and the latent projector.
//!
//! Run with: cargo run --release --example gradient_check

use c3::cascade::{CascadeConfig, CascadeModel};
use c3::gradcheck::max_relative_error;
use c3::graph::Graph;
use c3::tokenizer;
use c3::transformer::TransformerConfig;

fn main() -> c3::Result<()> {
    let config = CascadeConfig {
        encoder: TransformerConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            vocab: 260,
            max_seq_len: 64,
            rope_base: 10000.0,
            eps: 1e-6,
        },
        decoder: TransformerConfig {
            n_layers: 2,
            d_model: 24,
            n_heads: 2,
            d_mlp: 48,
            vocab: 260,
            max_seq_len: 96,
            rope_base: 10000.0,
            eps: 1e-6,
        },
        latent_tokens: 4,
        prompt: tokenizer::prompt_tokens(),
    };
    let mut model = CascadeModel::<f64>::init(config, 99)?;
    let text = tokenizer::encode(b"check me");

    // analytic gradients from one backward pass
    let mut g = Graph::new(&model.store);
    let loss = model.reconstruction_loss_graph(&mut g, &text)?;
    let grads = g.backward(loss);
    let analytic: Vec<(&'static str, _, Vec<f64>)> = [
        ("query", model.query),
        ("proj.w", model.proj_w),
        ("proj.b", model.proj_b),
    ]
    .into_iter()
    .map(|(name, id)| {
        let v = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; model.store.get(id).len()]);
        (name, id, v)
    })
    .collect();
    drop(grads);
    drop(g);

    // central differences, perturbing the live parameter store
    let step = 1e-5;
    for (name, id, analytic) in analytic {
        let n = model.store.get(id).len();
        let mut numeric = vec![0.0; n];
        for e in 0..n {
            let orig = model.store.get(id).data()[e];
            model.store.get_mut(id).data_mut()[e] = orig + step;
            let up = model.reconstruction_loss(&text)?;
            model.store.get_mut(id).data_mut()[e] = orig - step;
            let down = model.reconstruction_loss(&text)?;
            model.store.get_mut(id).data_mut()[e] = orig;
            numeric[e] = (up - down) / (2.0 * step);
        }
        let err = max_relative_error(&analytic, &numeric, 1.0);
        println!("{name:7} {n:4} elements  max relative error {err:.2e}");
        assert!(err <= 1e-4);
    }
    println!("analytic gradients agree with finite differences");
    Ok(())
}
