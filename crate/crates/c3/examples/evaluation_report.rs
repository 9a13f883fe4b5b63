//! Build an evaluation report from synthetic reference/hypothesis pairs:
//! token-count bins with mean precision and compression ratio, plus the
//! positional profile of where in the document the errors fall.
//!
//! Run with: cargo run --release --example evaluation_report

use c3::eval::{bin_report, make_record, positional_error_profile, EvalRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> c3::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let latents = 8;
    let mut records: Vec<EvalRecord> = Vec::new();
    for id in 0..200u64 {
        let len = rng.gen_range(60..200);
        let reference: Vec<usize> = (0..len).map(|_| rng.gen_range(0..256)).collect();
        // corrupt the tail: drop the last few tokens with growing probability
        let keep = len - rng.gen_range(0..=len / 12);
        let hypothesis = reference[..keep].to_vec();
        records.push(make_record(id, &reference, &hypothesis, latents, keep < len)?);
    }

    let report = bin_report(&records, &[60, 100, 140, 180])?;
    println!("{} documents, {} latent vectors each\n", report.total_documents, latents);
    println!("{:>10} {:>6} {:>15} {:>12}", "bin", "count", "mean precision", "mean ratio");
    for b in &report.bins {
        let hi = b.hi.map_or("inf".into(), |h| h.to_string());
        println!(
            "{:>4}..{:<5} {:>6} {:>15} {:>12}",
            b.lo,
            hi,
            b.count,
            b.mean_precision.map_or("null".into(), |v| format!("{v:.4}")),
            b.mean_ratio.map_or("null".into(), |v| format!("{v:.2}")),
        );
    }

    println!("\nerror mass by reference-position decile:");
    for (i, d) in positional_error_profile(&records).iter().enumerate() {
        let bar = d.map_or(0, |f| (f * 200.0).round() as usize);
        println!(
            "{:>4}%..{:>3}% {:6} {}",
            i * 10,
            (i + 1) * 10,
            d.map_or("null".into(), |f| format!("{f:.3}")),
            "#".repeat(bar),
        );
    }
    println!("\n(tail-heavy, as expected for truncation-style errors)");
    Ok(())
}
