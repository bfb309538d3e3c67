//! Byte corpora: windowing and a small synthetic text generator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MasaError, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| MasaError::io(path, e))?;
    if bytes.is_empty() {
        return Err(MasaError::invalid(format!("{} is empty", path.display())));
    }
    Ok(bytes)
}

/// Training windows of `seq_len + 1` bytes (inputs plus shifted targets),
/// consecutive windows sharing one byte. A trailing partial window is dropped.
pub fn train_windows(corpus: &[u8], seq_len: usize) -> Result<Vec<&[u8]>> {
    if seq_len == 0 {
        return Err(MasaError::invalid("sequence length must be positive"));
    }
    let windows: Vec<&[u8]> = (0..)
        .map(|i| i * seq_len)
        .take_while(|start| start + seq_len < corpus.len())
        .map(|start| &corpus[start..start + seq_len + 1])
        .collect();
    if windows.is_empty() {
        return Err(MasaError::invalid(format!(
            "corpus of {} bytes is shorter than one window of {}",
            corpus.len(),
            seq_len + 1
        )));
    }
    Ok(windows)
}

/// Like [`train_windows`] but keeps the trailing partial window so every
/// byte after the first is predicted exactly once.
pub fn eval_windows(corpus: &[u8], seq_len: usize) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < corpus.len() {
        let end = (start + seq_len + 1).min(corpus.len());
        out.push(&corpus[start..end]);
        start += seq_len;
    }
    out
}

/// Up to `count` calibration samples of `seq_len` bytes, evenly spaced.
pub fn calibration_samples(corpus: &[u8], seq_len: usize, count: usize) -> Result<Vec<Vec<u8>>> {
    if corpus.is_empty() || seq_len == 0 || count == 0 {
        return Err(MasaError::invalid("calibration needs bytes, a positive length and count"));
    }
    let len = seq_len.min(corpus.len());
    let starts = corpus.len() - len + 1;
    let n = count.min(starts);
    Ok((0..n)
        .map(|i| {
            let s = if n == 1 { 0 } else { i * (starts - 1) / (n - 1) };
            corpus[s..s + len].to_vec()
        })
        .collect())
}

const WORDS: [&str; 48] = [
    "the", "a", "one", "every", "some", "old", "small", "quiet", "bright", "heavy", "river", "stone",
    "garden", "window", "letter", "market", "teacher", "engine", "forest", "city", "song", "machine",
    "child", "road", "opens", "carries", "finds", "builds", "follows", "watches", "remembers", "moves",
    "near", "under", "across", "beside", "and", "but", "while", "because", "slowly", "again", "today",
    "north", "morning", "winter", "light", "water",
];

/// Deterministic English-like text with sentence structure and punctuation.
pub fn synthetic_text(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det = &WORDS[0..6];
    let adj = &WORDS[6..10];
    let noun = &WORDS[10..24];
    let verb = &WORDS[24..32];
    let prep = &WORDS[32..36];
    let conj = &WORDS[36..40];
    let adv = &WORDS[40..43];
    let tail = &WORDS[43..48];
    let mut out = String::with_capacity(len + 64);
    let pick = |rng: &mut ChaCha8Rng, set: &[&'static str]| set[rng.gen_range(0..set.len())];
    while out.len() < len {
        let mut sentence = Vec::new();
        let clauses = 1 + rng.gen_range(0..2);
        for c in 0..clauses {
            if c > 0 {
                sentence.push(pick(&mut rng, conj));
            }
            sentence.push(pick(&mut rng, det));
            if rng.gen_bool(0.4) {
                sentence.push(pick(&mut rng, adj));
            }
            sentence.push(pick(&mut rng, noun));
            sentence.push(pick(&mut rng, verb));
            sentence.push(pick(&mut rng, det));
            sentence.push(pick(&mut rng, noun));
            if rng.gen_bool(0.5) {
                sentence.push(pick(&mut rng, prep));
                sentence.push("the");
                sentence.push(pick(&mut rng, tail));
            }
            if rng.gen_bool(0.3) {
                sentence.push(pick(&mut rng, adv));
            }
        }
        let mut text = sentence.join(" ");
        text[..1].make_ascii_uppercase();
        out.push_str(&text);
        out.push_str(if rng.gen_bool(0.15) { ".\n" } else { ". " });
    }
    out.truncate(len);
    out.into_bytes()
}
