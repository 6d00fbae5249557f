//! Bijective toy simplification language: every ordinary word maps to
//! exactly one simplified word, so the inverse mapping is recoverable.

#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: usize = 10;

fn letter(i: usize) -> char {
    (b'a' + i as u8) as char
}

pub fn ordinary_word(i: usize) -> String {
    format!("ord{}", letter(i))
}

pub fn simplified_word(i: usize) -> String {
    format!("simp{}", letter(i))
}

/// Distinct word-index sequences of length `min..=max`.
pub fn sentences(n: usize, min: usize, max: usize, seed: u64, exclude: &HashSet<Vec<usize>>) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(min..=max);
        let s: Vec<usize> = (0..len).map(|_| rng.gen_range(0..WORDS)).collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

pub fn render(s: &[usize], word: fn(usize) -> String) -> String {
    s.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ")
}

pub fn write_side(path: &Path, sents: &[Vec<usize>], word: fn(usize) -> String) {
    let text: String = sents.iter().map(|s| render(s, word) + "\n").collect();
    std::fs::write(path, text).unwrap();
}

/// Train, held-out and simplified-only splits with no sentence shared
/// between them.
pub struct Splits {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub mono: Vec<Vec<usize>>,
}

pub fn splits(n_train: usize, n_test: usize, n_mono: usize, seed: u64) -> Splits {
    let all = sentences(n_train + n_test + n_mono, 3, 6, seed, &HashSet::new());
    Splits {
        train: all[..n_train].to_vec(),
        test: all[n_train..n_train + n_test].to_vec(),
        mono: all[n_train + n_test..].to_vec(),
    }
}
