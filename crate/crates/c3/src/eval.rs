//! Reconstruction evaluation: token-level edit-similarity precision,
//! compression ratios, length-binned reporting, and the positional error
//! profile (where in the document reconstruction errors fall).

use crate::cascade::CascadeModel;
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::tokenizer;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One edit from the canonical Levenshtein alignment, with its reference-side
/// token index (insertions sit between ref tokens at index `i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    Substitution(usize),
    Insertion(usize),
    Deletion(usize),
}

impl Edit {
    fn ref_index(self) -> usize {
        match self {
            Edit::Substitution(i) | Edit::Insertion(i) | Edit::Deletion(i) => i,
        }
    }
}

/// Levenshtein distance plus one canonical alignment. Ties in the backtrace
/// prefer substitution over insertion over deletion, so profiles are
/// deterministic.
pub fn levenshtein(reference: &[usize], hypothesis: &[usize]) -> (usize, Vec<Edit>) {
    let (m, n) = (reference.len(), hypothesis.len());
    let mut d = vec![0usize; (m + 1) * (n + 1)];
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    for i in 0..=m {
        d[idx(i, 0)] = i;
    }
    for j in 0..=n {
        d[idx(0, j)] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = d[idx(i - 1, j - 1)] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[idx(i, j - 1)] + 1;
            let del = d[idx(i - 1, j)] + 1;
            d[idx(i, j)] = sub.min(ins).min(del);
        }
    }
    let dist = d[idx(m, n)];
    let mut edits = Vec::new();
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = d[idx(i, j)];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if here == d[idx(i - 1, j - 1)] + cost {
                if cost == 1 {
                    edits.push(Edit::Substitution(i - 1));
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == d[idx(i, j - 1)] + 1 {
            edits.push(Edit::Insertion(i));
            j -= 1;
            continue;
        }
        edits.push(Edit::Deletion(i - 1));
        i -= 1;
    }
    edits.reverse();
    (dist, edits)
}

/// 1 − distance / max(len_ref, len_hyp), token-level, clamped to [0, 1].
pub fn precision(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("precision requires a non-empty reference"));
    }
    let (dist, _) = levenshtein(reference, hypothesis);
    let denom = reference.len().max(hypothesis.len()) as f64;
    Ok((1.0 - dist as f64 / denom).clamp(0.0, 1.0))
}

/// text tokens per latent token.
pub fn compression_ratio(text_token_count: usize, latent_count: usize) -> Result<f64> {
    if text_token_count == 0 || latent_count == 0 {
        return Err(Error::Config(
            "compression_ratio requires text_token_count >= 1 and latent_count >= 1".into(),
        ));
    }
    Ok(text_token_count as f64 / latent_count as f64)
}

/// Normalized reference-side positions of all alignment errors.
pub fn error_positions(reference: &[usize], hypothesis: &[usize]) -> Vec<f64> {
    let (_, edits) = levenshtein(reference, hypothesis);
    let len = reference.len() as f64;
    edits.iter().map(|e| e.ref_index() as f64 / len).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u64,
    pub text_token_count: usize,
    pub latent_count: usize,
    pub compression_ratio: f64,
    pub precision: f64,
    /// Normalized reference-side positions in [0, 1].
    pub error_positions: Vec<f64>,
    /// Generation hit the token budget before EOS.
    pub truncated: bool,
}

/// Pure record construction from a reference and its reconstruction.
pub fn make_record(
    id: u64,
    reference: &[usize],
    hypothesis: &[usize],
    latent_count: usize,
    truncated: bool,
) -> Result<EvalRecord> {
    Ok(EvalRecord {
        id,
        text_token_count: reference.len(),
        latent_count,
        compression_ratio: compression_ratio(reference.len(), latent_count)?,
        precision: precision(reference, hypothesis)?,
        error_positions: error_positions(reference, hypothesis),
        truncated,
    })
}

/// Greedily reconstruct every document and score it. The model is read-only
/// and shared across `workers` threads; record order follows document order.
pub fn evaluate(
    model: &CascadeModel<f32>,
    docs: &[Document],
    max_new_tokens: usize,
    workers: usize,
) -> Result<Vec<EvalRecord>> {
    let workers = workers.max(1).min(docs.len().max(1));
    let chunk = docs.len().div_ceil(workers);
    let mut out: Vec<Result<Vec<EvalRecord>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = docs
            .chunks(chunk.max(1))
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|doc| {
                            let reference = tokenizer::encode(doc.text.as_bytes());
                            let rec = model.reconstruct(&reference, max_new_tokens)?;
                            make_record(
                                doc.id,
                                &reference,
                                &rec.tokens,
                                model.config.latent_tokens,
                                rec.truncated,
                            )
                        })
                        .collect()
                })
            })
            .collect();
        for h in handles {
            out.push(h.join().expect("eval worker panicked"));
        }
    });
    let mut records = Vec::with_capacity(docs.len());
    for part in out {
        records.extend(part?);
    }
    Ok(records)
}

/// Per-bin aggregate; means are None when the bin is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo: usize,
    /// Exclusive upper edge; None marks the overflow bucket.
    pub hi: Option<usize>,
    pub count: usize,
    pub mean_precision: Option<f64>,
    pub mean_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub latent_count: usize,
    pub total_documents: usize,
    pub bins: Vec<BinStats>,
    /// Decile fractions of pooled error positions; all None when error-free.
    pub deciles: [Option<f64>; 10],
}

/// Aggregate records into half-open token-count bins [e0,e1), [e1,e2), ...
/// Documents outside every bin land in a trailing overflow bucket.
pub fn bin_report(records: &[EvalRecord], bin_edges: &[usize]) -> Result<EvalReport> {
    if bin_edges.len() < 2 {
        return Err(Error::Config("need at least two bin edges".into()));
    }
    if !bin_edges.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("bin edges must be strictly increasing".into()));
    }
    let n_bins = bin_edges.len() - 1;
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); n_bins + 1]; // last = overflow
    for r in records {
        let t = r.text_token_count;
        let slot = bin_edges
            .windows(2)
            .position(|w| t >= w[0] && t < w[1])
            .unwrap_or(n_bins);
        sums[slot].0 += 1;
        sums[slot].1 += r.precision;
        sums[slot].2 += r.compression_ratio;
    }
    let stat = |lo, hi, (count, p, c): (usize, f64, f64)| BinStats {
        lo,
        hi,
        count,
        mean_precision: (count > 0).then(|| p / count as f64),
        mean_ratio: (count > 0).then(|| c / count as f64),
    };
    let mut bins: Vec<BinStats> = bin_edges
        .windows(2)
        .zip(&sums)
        .map(|(w, &s)| stat(w[0], Some(w[1]), s))
        .collect();
    bins.push(stat(bin_edges[n_bins], None, sums[n_bins]));
    let latent_count = records.first().map_or(0, |r| r.latent_count);
    Ok(EvalReport {
        latent_count,
        total_documents: records.len(),
        bins,
        deciles: positional_error_profile(records),
    })
}

/// Pooled error positions bucketed into deciles of normalized reference
/// position; fractions sum to 1, or all-None when there are no errors.
pub fn positional_error_profile(records: &[EvalRecord]) -> [Option<f64>; 10] {
    let mut counts = [0usize; 10];
    let mut total = 0usize;
    for r in records {
        for &p in &r.error_positions {
            let decile = ((p * 10.0).floor() as usize).min(9);
            counts[decile] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return [None; 10];
    }
    counts.map(|c| Some(c as f64 / total as f64))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| x.to_string())
}

/// Plot-ready CSV: `bin_lo,bin_hi,count,mean_precision,mean_ratio`.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count,mean_precision,mean_ratio\n");
    for b in &report.bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lo,
            b.hi.map_or_else(|| "inf".to_string(), |h| h.to_string()),
            b.count,
            fmt_opt(b.mean_precision),
            fmt_opt(b.mean_ratio),
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Decile profile CSV: `decile,fraction`.
pub fn write_deciles_csv(deciles: &[Option<f64>; 10], path: &Path) -> Result<()> {
    let mut out = String::from("decile,fraction\n");
    for (i, d) in deciles.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, fmt_opt(*d)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}
