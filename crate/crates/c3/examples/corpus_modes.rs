//! Generate one sample document from each synthetic corpus mode.
//!
//! Run with: cargo run --release --example corpus_modes

use c3::corpus::{generate, CorpusSpec, Mode, ShuffleUnit};

fn main() -> c3::Result<()> {
    for mode in [
        Mode::Prose,
        Mode::SecondLanguage,
        Mode::RandomChars,
        Mode::Shuffled,
    ] {
        let spec = CorpusSpec {
            seed: 11,
            n_documents: 1,
            min_tokens: 240,
            max_tokens: 240,
            mode,
            injection_rate: 0.15,
            shuffle_unit: ShuffleUnit::Sentence,
        };
        let doc = generate(&spec)?.remove(0);
        println!("--- {} ({} byte tokens) ---", doc.mode, doc.token_count);
        println!("{}\n", doc.text);
    }
    Ok(())
}
