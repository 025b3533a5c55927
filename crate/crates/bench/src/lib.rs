//! Benchmarks live in `benches/`. Run with `cargo bench -p codeseek-bench`.

use codeseek_core::{corpus::build_vocab, synthetic, CodeQueryPair, Vocabulary};

/// Synthetic pairs and their vocabulary, shared by the benches.
pub fn fixture(n: usize) -> (Vec<CodeQueryPair>, Vocabulary) {
    let pairs = synthetic::generate(n, 0);
    let vocab = build_vocab(&pairs, 20000).expect("vocabulary");
    (pairs, vocab)
}
