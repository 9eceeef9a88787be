//! Input corpora: seeded synthetic token sequences and token-id text files.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TokenSequence;

/// `count` sequences of `len` uniform token ids below `vocab_size`.
pub fn synthetic(seed: u64, count: usize, len: usize, vocab_size: usize) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| TokenSequence((0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect()))
        .collect()
}

/// Parses one token id per line; blank lines and `#` comments are skipped.
pub fn parse_token_ids(text: &str, origin: &str) -> Result<TokenSequence> {
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id = line
            .parse::<u32>()
            .map_err(|e| Error::parse(format!("{origin}:{}", i + 1), format!("{line:?}: {e}")))?;
        ids.push(id);
    }
    Ok(TokenSequence(ids))
}

pub fn read_token_file(path: &Path) -> Result<TokenSequence> {
    let text = fs::read_to_string(path)?;
    parse_token_ids(&text, &path.display().to_string())
}
