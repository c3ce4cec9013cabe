//! Key-semantic dictionaries: for every token of a window, the indices of
//! its `k` most similar tokens under a raw dot product.
//!
//! A dictionary holds indices only. It is built once from a stage's input
//! tokens and then shared, read-only, by every layer of the stage.

use std::fmt;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::patching::{TokenSet, WindowSet};
use crate::tensor::{dot, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SimilarityKind {
    #[default]
    Dot,
    /// Dot product of L2-normalised tokens. Zero tokens get similarity 0.
    Cosine,
}

/// Symmetric `N × N` token similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.values.rows()
    }
}

pub fn similarity(tokens: &TokenSet) -> Result<SimilarityMatrix> {
    similarity_with(tokens, SimilarityKind::Dot)
}

/// Each unordered pair (diagonal included) is evaluated once and mirrored.
pub fn similarity_with(tokens: &TokenSet, kind: SimilarityKind) -> Result<SimilarityMatrix> {
    let n = tokens.len();
    if n < 2 {
        return Err(invalid(format!("similarity needs at least 2 tokens, got {n}")));
    }
    let x = &tokens.tokens;
    let norms: Vec<f64> = match kind {
        SimilarityKind::Dot => vec![1.0; n],
        SimilarityKind::Cosine => (0..n)
            .map(|i| {
                let l = dot(x.row(i), x.row(i)).sqrt();
                if l > 0.0 {
                    1.0 / l
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = dot(x.row(i), x.row(j)) * norms[i] * norms[j];
            values.set(i, j, s);
            values.set(j, i, s);
        }
    }
    crate::meter::count_macs(n * (n + 1) / 2 * x.cols());
    Ok(SimilarityMatrix { values })
}

/// Per-token sorted top-`k` neighbour table.
#[derive(Clone, PartialEq, Eq)]
pub struct KeySemanticDictionary {
    n: usize,
    k: usize,
    include_self: bool,
    neighbors: Vec<usize>,
}

impl KeySemanticDictionary {
    /// Builds a dictionary from explicit rows, validating range and
    /// uniqueness (and self-exclusion unless `include_self`).
    pub fn from_rows(rows: &[Vec<usize>], include_self: bool) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        let mut neighbors = Vec::with_capacity(n * k);
        let mut seen = vec![usize::MAX; n];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(invalid(format!("dictionary row {i} has {} entries, expected {k}", row.len())));
            }
            for &j in row {
                if j >= n {
                    return Err(Error::IndexOutOfRange { index: j, n });
                }
                if seen[j] == i {
                    return Err(invalid(format!("dictionary row {i} repeats index {j}")));
                }
                if j == i && !include_self {
                    return Err(invalid(format!("dictionary row {i} contains itself")));
                }
                seen[j] = i;
            }
            neighbors.extend_from_slice(row);
        }
        Ok(KeySemanticDictionary {
            n,
            k,
            include_self,
            neighbors,
        })
    }

    /// Every permitted index for each token, in ascending order.
    pub fn complete(n: usize, include_self: bool) -> Self {
        let rows: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| include_self || j != i).collect())
            .collect();
        Self::from_rows(&rows, include_self).expect("complete dictionary is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn include_self(&self) -> bool {
        self.include_self
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.neighbors.chunks(self.k.max(1)).take(self.n)
    }

    /// Dictionary of the permuted token set whose token `p` is the original
    /// token `perm[p]`: rows are reordered and stored indices remapped.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (p, &o) in perm.iter().enumerate() {
            inverse[o] = p;
        }
        let mut neighbors = Vec::with_capacity(self.neighbors.len());
        for &o in perm {
            neighbors.extend(self.row(o).iter().map(|&j| inverse[j]));
        }
        KeySemanticDictionary {
            neighbors,
            ..self.clone()
        }
    }

    /// One line per token: `i: j1 j2 … jk`.
    pub fn dump(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for KeySemanticDictionary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n {
            write!(f, "{i}:")?;
            for j in self.row(i) {
                write!(f, " {j}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl fmt::Debug for KeySemanticDictionary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeySemanticDictionary(n={}, k={})\n{}", self.n, self.k, self)
    }
}

/// Largest admissible `k` for `n` tokens.
pub fn max_k(n: usize, include_self: bool) -> usize {
    if include_self {
        n
    } else {
        n.saturating_sub(1)
    }
}

/// Top-`k` selection per row: descending similarity, ties to the lower index.
pub fn knn_select(sim: &SimilarityMatrix, k: usize, include_self: bool) -> Result<KeySemanticDictionary> {
    let n = sim.n();
    let max = max_k(n, include_self);
    if k == 0 || k > max {
        return Err(Error::KOutOfRange { k, max });
    }
    let mut neighbors = Vec::with_capacity(n * k);
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let row = sim.values.row(i);
        candidates.clear();
        candidates.extend((0..n).filter(|&j| include_self || j != i));
        let by_rank = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, by_rank);
            candidates.truncate(k);
        }
        candidates.sort_unstable_by(by_rank);
        neighbors.extend_from_slice(&candidates);
    }
    Ok(KeySemanticDictionary {
        n,
        k,
        include_self,
        neighbors,
    })
}

/// Similarity plus top-`k` for one window.
pub fn build_dictionary(tokens: &TokenSet, k: usize, include_self: bool, kind: SimilarityKind) -> Result<KeySemanticDictionary> {
    let n = tokens.len();
    let max = max_k(n, include_self);
    if k == 0 || k > max {
        return Err(Error::KOutOfRange { k, max });
    }
    knn_select(&similarity_with(tokens, kind)?, k, include_self)
}

/// One dictionary per window, from the raw (unprojected) window tokens.
pub fn dictionary_for_stage(ws: &WindowSet, k: usize, include_self: bool) -> Result<Vec<KeySemanticDictionary>> {
    ws.windows
        .par_iter()
        .map(|w| build_dictionary(w, k, include_self, SimilarityKind::Dot))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::{window_partition, FeatureMap};
    use crate::RngStream;

    fn sim_from(rows: &[[f64; 3]]) -> SimilarityMatrix {
        SimilarityMatrix {
            values: Matrix::from_rows(rows),
        }
    }

    /// Full sort of every permitted candidate, then truncate.
    fn exhaustive(sim: &SimilarityMatrix, k: usize, include_self: bool) -> Vec<Vec<usize>> {
        let n = sim.n();
        (0..n)
            .map(|i| {
                let mut c: Vec<usize> = (0..n).filter(|&j| include_self || j != i).collect();
                c.sort_by(|&a, &b| {
                    let (sa, sb) = (sim.values.get(i, a), sim.values.get(i, b));
                    sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
                });
                c.truncate(k);
                c
            })
            .collect()
    }

    fn rows_of(d: &KeySemanticDictionary) -> Vec<Vec<usize>> {
        d.rows().map(<[usize]>::to_vec).collect()
    }

    #[test]
    fn hand_dot_products() {
        let t = TokenSet::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]));
        let s = similarity(&t).unwrap();
        assert_eq!(s.values, Matrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]));
    }

    #[test]
    fn orthonormal_tokens_give_identity() {
        let s = similarity(&TokenSet::new(Matrix::identity(5))).unwrap();
        assert_eq!(s.values, Matrix::identity(5));
    }

    #[test]
    fn matches_pairwise_loop() {
        let t = TokenSet::new(Matrix::random_normal(16, 4, 1.0, &mut RngStream::new(5)));
        let s = similarity(&t).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let mut acc = 0.0;
                for c in 0..4 {
                    acc += t.tokens.get(i, c) * t.tokens.get(j, c);
                }
                assert_eq!(s.values.get(i, j), acc);
                assert_eq!(s.values.get(i, j), s.values.get(j, i));
            }
        }
    }

    #[test]
    fn single_token_rejected() {
        assert!(similarity(&TokenSet::new(Matrix::zeros(1, 3))).is_err());
    }

    #[test]
    fn cosine_ignores_scale() {
        let t = TokenSet::new(Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0], [1.0, 1.0]]));
        let s = similarity_with(&t, SimilarityKind::Cosine).unwrap();
        assert!((s.values.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((s.values.get(0, 2) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn three_token_example() {
        let sim = sim_from(&[[9.0, 0.9, 0.1], [0.9, 9.0, 0.5], [0.1, 0.5, 9.0]]);
        let d = knn_select(&sim, 1, false).unwrap();
        assert_eq!(rows_of(&d), vec![vec![1], vec![0], vec![1]]);
        assert_eq!(rows_of(&d), exhaustive(&sim, 1, false));
    }

    #[test]
    fn two_tokens_pick_each_other() {
        let sim = SimilarityMatrix {
            values: Matrix::from_rows(&[[5.0, -3.0], [-3.0, 1.0]]),
        };
        assert_eq!(rows_of(&knn_select(&sim, 1, false).unwrap()), vec![vec![1], vec![0]]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let sim = SimilarityMatrix {
            values: Matrix::filled(4, 4, 0.25),
        };
        let d = knn_select(&sim, 2, false).unwrap();
        assert_eq!(rows_of(&d), vec![vec![1, 2], vec![0, 2], vec![0, 1], vec![0, 1]]);
        assert_eq!(rows_of(&d), exhaustive(&sim, 2, false));
    }

    #[test]
    fn include_self_allows_own_index() {
        let sim = SimilarityMatrix {
            values: Matrix::identity(3),
        };
        let d = knn_select(&sim, 1, true).unwrap();
        assert_eq!(rows_of(&d), vec![vec![0], vec![1], vec![2]]);
        assert!(knn_select(&sim, 3, true).is_ok());
        assert!(knn_select(&sim, 3, false).is_err());
    }

    #[test]
    fn k_range_errors() {
        let sim = SimilarityMatrix {
            values: Matrix::identity(4),
        };
        assert_eq!(knn_select(&sim, 0, false).unwrap_err(), Error::KOutOfRange { k: 0, max: 3 });
        assert_eq!(knn_select(&sim, 4, false).unwrap_err(), Error::KOutOfRange { k: 4, max: 3 });
    }

    #[test]
    fn random_rows_match_exhaustive_sort() {
        let mut rng = RngStream::new(21);
        for n in [2, 3, 7, 16, 33] {
            let t = TokenSet::new(Matrix::random_normal(n, 3, 1.0, &mut rng));
            let sim = similarity(&t).unwrap();
            for k in 1..n {
                assert_eq!(rows_of(&knn_select(&sim, k, false).unwrap()), exhaustive(&sim, k, false));
            }
            assert_eq!(rows_of(&knn_select(&sim, n, true).unwrap()), exhaustive(&sim, n, true));
        }
    }

    #[test]
    fn full_k_contains_everything_but_self() {
        let t = TokenSet::new(Matrix::random_normal(9, 2, 1.0, &mut RngStream::new(3)));
        let d = knn_select(&similarity(&t).unwrap(), 8, false).unwrap();
        for (i, row) in d.rows().enumerate() {
            let mut r = row.to_vec();
            r.sort_unstable();
            assert_eq!(r, (0..9).filter(|&j| j != i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn permutation_covariance() {
        let mut rng = RngStream::new(13);
        for _ in 0..50 {
            let n = 2 + rng.index(20);
            let k = 1 + rng.index(n - 1);
            let t = Matrix::random_normal(n, 3, 1.0, &mut rng);
            let perm = rng.permutation(n);
            let d = knn_select(&similarity(&TokenSet::new(t.clone())).unwrap(), k, false).unwrap();
            let tp = TokenSet::new(t.select_rows(&perm).unwrap());
            let dp = knn_select(&similarity(&tp).unwrap(), k, false).unwrap();
            assert_eq!(dp, d.permuted(&perm));
        }
    }

    #[test]
    fn identical_tokens_per_window() {
        let f = FeatureMap::new(2, 4, Matrix::filled(8, 2, 1.5)).unwrap();
        let ws = window_partition(&f, 2).unwrap();
        let dicts = dictionary_for_stage(&ws, 1, false).unwrap();
        assert_eq!(dicts.len(), 2);
        for d in &dicts {
            assert_eq!(rows_of(d), vec![vec![1], vec![0], vec![0], vec![0]]);
        }
    }

    #[test]
    fn stage_k_too_large() {
        let f = FeatureMap::random_normal(4, 4, 1, 1.0, &mut RngStream::new(1));
        let ws = window_partition(&f, 2).unwrap();
        assert!(dictionary_for_stage(&ws, 4, false).is_err());
        assert!(dictionary_for_stage(&ws, 4, true).is_ok());
    }

    #[test]
    fn deterministic_and_dump_format() {
        let t = TokenSet::new(Matrix::random_normal(6, 2, 1.0, &mut RngStream::new(8)));
        let a = build_dictionary(&t, 2, false, SimilarityKind::Dot).unwrap();
        let b = build_dictionary(&t, 2, false, SimilarityKind::Dot).unwrap();
        assert_eq!(a.dump(), b.dump());
        let dump = a.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], format!("0: {} {}", a.row(0)[0], a.row(0)[1]));
    }

    #[test]
    fn from_rows_validation() {
        assert!(KeySemanticDictionary::from_rows(&[vec![1], vec![1]], false).is_err());
        assert!(KeySemanticDictionary::from_rows(&[vec![1], vec![2]], false).is_err());
        assert!(KeySemanticDictionary::from_rows(&[vec![1, 1], vec![0, 0]], true).is_err());
        assert!(KeySemanticDictionary::from_rows(&[vec![1], vec![0]], false).is_ok());
    }
}
