//! Shared inputs for the criterion benchmarks.

use keysem_core::dictionary::{build_dictionary, SimilarityKind};
use keysem_core::{KeySemanticDictionary, Matrix, RngStream, TokenSet};

/// Random queries, keys and values of `n` tokens with embedding `d`, and a
/// `k`-neighbour dictionary built from separate random tokens.
pub struct AttentionInput {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub dict: KeySemanticDictionary,
}

pub fn attention_input(n: usize, k: usize, d: usize, seed: u64) -> AttentionInput {
    let mut rng = RngStream::new(seed);
    let q = Matrix::random_normal(n, d, 1.0, &mut rng);
    let kx = Matrix::random_normal(n, d, 1.0, &mut rng);
    let v = Matrix::random_normal(n, d, 1.0, &mut rng);
    let tokens = TokenSet::new(Matrix::random_normal(n, d, 1.0, &mut rng));
    let dict = build_dictionary(&tokens, k, false, SimilarityKind::Dot).expect("k fits n");
    AttentionInput { q, k: kx, v, dict }
}
