//! Synthetic English-like text for training tests: capitalised sentences of
//! Zipf-ish words, grouped into SEP-terminated documents.

use fm_core::model::SEP;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB_WORDS: usize = 300;

pub fn synthetic_text(n_docs: usize, doc_len: usize) -> Vec<u8> {
    let mut wr = ChaCha8Rng::seed_from_u64(99);
    let words: Vec<Vec<u8>> = (0..VOCAB_WORDS)
        .map(|_| {
            let n = wr.random_range(2..8);
            (0..n).map(|_| b'a' + wr.random_range(0..26u8)).collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = Vec::with_capacity(n_docs * (doc_len + 16));
    for _ in 0..n_docs {
        let start = out.len();
        while out.len() - start < doc_len {
            let n = rng.random_range(4..12);
            for i in 0..n {
                // u³ skews draws toward the first words.
                let u: f64 = rng.random();
                let w = &words[(u * u * u * VOCAB_WORDS as f64) as usize];
                if i == 0 {
                    out.push(w[0].to_ascii_uppercase());
                    out.extend_from_slice(&w[1..]);
                } else {
                    out.push(b' ');
                    out.extend_from_slice(w);
                }
            }
            out.extend_from_slice(b". ");
        }
        out.push(SEP);
    }
    out
}
