//! Byte-level tokenizer: one token per byte, four special ids on top.
//!
//! The vocabulary is the 256 byte values plus {BOS, EOS, PAD, PROMPT_BEGIN}
//! as the top four ids, so "text token count" equals byte length exactly and
//! compression ratios are exactly computable.

use crate::error::{Error, Result};

/// Byte values 0..=255 map to ids 0..=255.
pub const BYTE_VOCAB: usize = 256;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const PROMPT_BEGIN: usize = 259;
/// Total vocabulary size (256 bytes + 4 specials).
pub const VOCAB_SIZE: usize = 260;

/// The literal reconstruction instruction fed to the decoder.
pub const PROMPT_TEXT: &[u8] = b"repeat the text: ";

/// Variable-length sequence of token ids in [0, VOCAB_SIZE).
pub type TokenSequence = Vec<usize>;

/// One token per byte; never emits special ids.
pub fn encode(text: &[u8]) -> TokenSequence {
    text.iter().map(|&b| b as usize).collect()
}

/// Inverse of `encode`. Decoding stops at the first EOS; PAD tokens are
/// skipped; any other special id is an error.
pub fn decode(tokens: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            EOS => break,
            PAD => continue,
            b if b < BYTE_VOCAB => out.push(b as u8),
            other => {
                return Err(Error::Token(format!(
                    "cannot decode special token id {other}"
                )))
            }
        }
    }
    Ok(out)
}

/// Prompt token ids: PROMPT_BEGIN followed by the bytes of
/// "repeat the text: ".
pub fn prompt_tokens() -> TokenSequence {
    let mut p = vec![PROMPT_BEGIN];
    p.extend(PROMPT_TEXT.iter().map(|&b| b as usize));
    p
}
