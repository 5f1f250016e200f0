//! Node identifiers (orthogonal random features, Laplacian eigenvectors,
//! exact orthonormal, or non-orthogonal random baselines) and type
//! identifiers, plus the training-time augmentations applied to them.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::equivariant::bell_number;
use crate::graphs::{normalized_laplacian, Graph};
use crate::numerics::{gaussian_matrix, qr_orthonormal, sym_eig, Matrix, NumericsError, RngSeed};

#[derive(Debug, Error)]
pub enum IdentifierError {
    #[error("need d_p >= n for exact orthonormal identifiers (n={n}, d_p={d_p})")]
    WidthTooSmall { n: usize, d_p: usize },
    #[error("type identifiers need d_e >= 2, got {0}")]
    TypeWidthTooSmall(usize),
    #[error("operation requires Laplacian identifiers, got {0:?}")]
    WrongKind(IdentifierKind),
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropoutRate(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Equivariant(#[from] crate::equivariant::EquivariantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum IdentifierKind {
    Orf,
    Laplacian,
    ExactOrthonormal,
    RandomNonOrthogonal,
}

impl IdentifierKind {
    /// Command-line token for this kind.
    pub fn name(&self) -> &'static str {
        match self {
            IdentifierKind::Orf => "orf",
            IdentifierKind::Laplacian => "lap",
            IdentifierKind::ExactOrthonormal => "exact",
            IdentifierKind::RandomNonOrthogonal => "random-nonorth",
        }
    }

    pub fn parse(s: &str) -> Option<IdentifierKind> {
        Some(match s {
            "orf" => IdentifierKind::Orf,
            "lap" => IdentifierKind::Laplacian,
            "exact" => IdentifierKind::ExactOrthonormal,
            "random-nonorth" => IdentifierKind::RandomNonOrthogonal,
            _ => return None,
        })
    }
}

/// Per-node identifier vectors: rows of an (exactly or nearly) orthonormal
/// `n x d_p` matrix.
#[derive(Debug, Clone)]
pub struct NodeIdentifiers {
    pub p: Matrix,
    pub kind: IdentifierKind,
}

impl NodeIdentifiers {
    pub fn n(&self) -> usize {
        self.p.rows()
    }

    pub fn width(&self) -> usize {
        self.p.cols()
    }

    /// `‖P P^T − I‖∞`: zero exactly when the rows are orthonormal.
    pub fn row_orthonormality_defect(&self) -> f64 {
        self.p.transpose().orthonormality_defect()
    }
}

fn fit_columns(q: Matrix, d_p: usize, rng: &mut impl Rng) -> Matrix {
    let n = q.rows();
    if q.cols() == d_p {
        return q;
    }
    let mut p = Matrix::zeros(n, d_p);
    if q.cols() < d_p {
        // Zero-pad extra channels.
        for i in 0..n {
            p.row_mut(i)[..q.cols()].copy_from_slice(q.row(i));
        }
    } else {
        // Keep a random column subset, without replacement.
        let mut cols: Vec<usize> = (0..q.cols()).collect();
        cols.shuffle(rng);
        cols.truncate(d_p);
        cols.sort_unstable();
        for i in 0..n {
            for (slot, &c) in cols.iter().enumerate() {
                p.set(i, slot, q.get(i, c));
            }
        }
    }
    p
}

/// Orthogonal random features: rows of `Q` from the QR factorization of an
/// `n x n` Gaussian matrix, zero-padded or column-subsampled to width `d_p`.
pub fn orf_identifiers(n: usize, d_p: usize, seed: RngSeed) -> Result<NodeIdentifiers, IdentifierError> {
    let g = gaussian_matrix(n, n, seed)?;
    let q = qr_orthonormal(&g)?;
    let mut rng = seed.child(1).rng();
    Ok(NodeIdentifiers {
        p: fit_columns(q, d_p, &mut rng),
        kind: IdentifierKind::Orf,
    })
}

/// Laplacian eigenvector identifiers: eigenvectors of the normalized
/// Laplacian sorted by ascending eigenvalue, truncated or zero-padded to
/// `d_p` columns, with deterministic per-column signs.
pub fn lap_identifiers(g: &Graph, d_p: usize) -> Result<NodeIdentifiers, IdentifierError> {
    let lap = normalized_laplacian(g);
    let (_, vectors) = sym_eig(&lap)?;
    let n = g.n();
    let keep = n.min(d_p);
    let mut p = Matrix::zeros(n, d_p);
    for i in 0..n {
        for j in 0..keep {
            p.set(i, j, vectors.get(i, j));
        }
    }
    Ok(NodeIdentifiers {
        p,
        kind: IdentifierKind::Laplacian,
    })
}

/// Rows of `[I_n | 0]`: exactly orthonormal, used by the constructive
/// verification mode. Requires `d_p >= n`.
pub fn exact_orthonormal_identifiers(n: usize, d_p: usize) -> Result<NodeIdentifiers, IdentifierError> {
    if d_p < n {
        return Err(IdentifierError::WidthTooSmall { n, d_p });
    }
    let mut p = Matrix::zeros(n, d_p);
    for i in 0..n {
        p.set(i, i, 1.0);
    }
    Ok(NodeIdentifiers {
        p,
        kind: IdentifierKind::ExactOrthonormal,
    })
}

/// Ablation baseline: i.i.d. Gaussian rows normalized to unit length. Not
/// orthogonal; pairwise dots concentrate around `d_p^{-1/2}` in magnitude.
pub fn random_nonorthogonal_identifiers(
    n: usize,
    d_p: usize,
    seed: RngSeed,
) -> Result<NodeIdentifiers, IdentifierError> {
    let mut p = gaussian_matrix(n, d_p, seed)?;
    for i in 0..n {
        let row = p.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v /= norm;
            }
        }
    }
    Ok(NodeIdentifiers {
        p,
        kind: IdentifierKind::RandomNonOrthogonal,
    })
}

/// Multiply each column by an independent fair-coin sign. Only meaningful for
/// Laplacian identifiers, whose eigenvectors are defined up to sign.
pub fn sign_flip_augment(p: &NodeIdentifiers, seed: RngSeed) -> Result<NodeIdentifiers, IdentifierError> {
    if p.kind != IdentifierKind::Laplacian {
        return Err(IdentifierError::WrongKind(p.kind));
    }
    let mut rng = seed.rng();
    let mut out = p.p.clone();
    for j in 0..out.cols() {
        if rng.gen_bool(0.5) {
            for i in 0..out.rows() {
                let v = -out.get(i, j);
                out.set(i, j, v);
            }
        }
    }
    Ok(NodeIdentifiers {
        p: out,
        kind: p.kind,
    })
}

/// Channel dropout on identifier columns: each column is zeroed with
/// probability `rate` and survivors are rescaled by `1/(1-rate)` so the
/// expectation over seeds equals the input.
pub fn eigvec_dropout(
    p: &NodeIdentifiers,
    rate: f64,
    seed: RngSeed,
) -> Result<NodeIdentifiers, IdentifierError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(IdentifierError::BadDropoutRate(rate));
    }
    let mut rng = seed.rng();
    let mut out = p.p.clone();
    let scale = 1.0 / (1.0 - rate);
    for j in 0..out.cols() {
        if rng.gen_bool(rate) {
            for i in 0..out.rows() {
                out.set(i, j, 0.0);
            }
        } else {
            for i in 0..out.rows() {
                let v = out.get(i, j) * scale;
                out.set(i, j, v);
            }
        }
    }
    Ok(NodeIdentifiers {
        p: out,
        kind: p.kind,
    })
}

/// Type identifier rows, one per order-`k` equivalence class.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TypeIdentifiers {
    pub e: Matrix,
    pub trainable: bool,
}

impl TypeIdentifiers {
    pub fn num_types(&self) -> usize {
        self.e.rows()
    }

    pub fn width(&self) -> usize {
        self.e.cols()
    }
}

/// Constructive type identifiers: radially equispaced unit vectors in the
/// first two coordinates. Any two distinct rows have dot product at most
/// `cos(2*pi/bell(k))`.
pub fn equispaced_type_identifiers(k: usize, d_e: usize) -> Result<TypeIdentifiers, IdentifierError> {
    if d_e < 2 {
        return Err(IdentifierError::TypeWidthTooSmall(d_e));
    }
    let count = bell_number(k)?;
    let mut e = Matrix::zeros(count, d_e);
    for r in 0..count {
        let angle = 2.0 * std::f64::consts::PI * r as f64 / count as f64;
        e.set(r, 0, angle.cos());
        e.set(r, 1, angle.sin());
    }
    Ok(TypeIdentifiers { e, trainable: false })
}

/// Randomly initialized trainable type identifiers.
pub fn random_type_identifiers(
    k: usize,
    d_e: usize,
    seed: RngSeed,
) -> Result<TypeIdentifiers, IdentifierError> {
    let count = bell_number(k)?;
    let mut e = gaussian_matrix(count, d_e, seed)?;
    e.scale(0.1);
    Ok(TypeIdentifiers { e, trainable: true })
}

/// Separation margin `1 - cos(2*pi/bell(k))` guaranteed between equispaced
/// type identifier rows.
pub fn type_identifier_margin(k: usize) -> Result<f64, IdentifierError> {
    let count = bell_number(k)? as f64;
    Ok(1.0 - (2.0 * std::f64::consts::PI / count).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::barabasi_albert;
    use crate::graphs::Graph;

    #[test]
    fn orf_square_is_orthonormal() {
        let ids = orf_identifiers(8, 8, RngSeed(2)).unwrap();
        assert!(ids.row_orthonormality_defect() <= 1e-10);
    }

    #[test]
    fn orf_zero_pads_when_wide() {
        let ids = orf_identifiers(4, 8, RngSeed(3)).unwrap();
        for i in 0..4 {
            for j in 4..8 {
                assert_eq!(ids.p.get(i, j), 0.0);
            }
        }
        assert!(ids.row_orthonormality_defect() <= 1e-10);
    }

    #[test]
    fn orf_subsamples_when_narrow() {
        let ids = orf_identifiers(16, 8, RngSeed(4)).unwrap();
        assert_eq!(ids.width(), 8);
        for i in 0..16 {
            let norm2: f64 = ids.p.row(i).iter().map(|v| v * v).sum();
            assert!(norm2 > 0.0 && norm2 <= 1.0 + 1e-12);
        }
        // Near-orthonormal regime: defect is genuinely nonzero.
        assert!(ids.row_orthonormality_defect() > 1e-3);
    }

    #[test]
    fn lap_full_width_orthonormal() {
        let g = barabasi_albert(6, 2, RngSeed(5)).unwrap();
        let ids = lap_identifiers(&g, 6).unwrap();
        assert!(ids.row_orthonormality_defect() <= 1e-8);
    }

    #[test]
    fn lap_path_graph_null_eigenvector() {
        // Path on 3 nodes: first column is the eigenvalue-0 eigenvector,
        // proportional to D^{1/2} 1 = (1, sqrt(2), 1) normalized.
        let g = Graph::new(3, vec![(0, 1), (1, 2)], None, None).unwrap();
        let ids = lap_identifiers(&g, 3).unwrap();
        let c0 = ids.p.column(0);
        let norm = (1.0f64 + 2.0 + 1.0).sqrt();
        let expect = [1.0 / norm, (2.0f64).sqrt() / norm, 1.0 / norm];
        for (got, want) in c0.iter().zip(expect) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn lap_chain_eigenvectors_sign_changes_increase() {
        // 1D chain: eigenvectors are discrete cosines; the number of sign
        // changes grows with the eigenvalue index.
        let n = 8;
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let g = Graph::new(n, edges, None, None).unwrap();
        let ids = lap_identifiers(&g, n).unwrap();
        let mut changes = Vec::new();
        for j in 0..n {
            let col = ids.p.column(j);
            let mut c = 0;
            for w in col.windows(2) {
                if w[0] * w[1] < 0.0 {
                    c += 1;
                }
            }
            changes.push(c);
        }
        for w in changes.windows(2) {
            assert!(w[0] <= w[1], "sign changes {changes:?} not monotone");
        }
        assert_eq!(changes[0], 0);
        assert!(changes[n - 1] >= n - 2);
    }

    #[test]
    fn exact_identifiers_are_standard_basis() {
        let ids = exact_orthonormal_identifiers(3, 4).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(ids.p.get(i, j), expect);
            }
        }
        assert_eq!(ids.row_orthonormality_defect(), 0.0);
    }

    #[test]
    fn exact_identifiers_reject_narrow() {
        assert!(exact_orthonormal_identifiers(4, 3).is_err());
    }

    #[test]
    fn incidence_property() {
        // [P_u, P_v] . [P_k, P_k] = 1 iff k is an endpoint (u != v), else 0.
        let ids = exact_orthonormal_identifiers(5, 5).unwrap();
        for u in 0..5 {
            for v in 0..5 {
                if u == v {
                    continue;
                }
                for k in 0..5 {
                    let dot: f64 = ids
                        .p
                        .row(u)
                        .iter()
                        .zip(ids.p.row(k))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + ids
                            .p
                            .row(v)
                            .iter()
                            .zip(ids.p.row(k))
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    let expect = if k == u || k == v { 1.0 } else { 0.0 };
                    assert_eq!(dot, expect);
                }
            }
        }
    }

    #[test]
    fn random_rows_unit_norm() {
        let ids = random_nonorthogonal_identifiers(10, 16, RngSeed(6)).unwrap();
        for i in 0..10 {
            let norm: f64 = ids.p.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_pairwise_dots_scale() {
        // E|P_i . P_j| is approximately sqrt(2/(pi d_p)); check the coarse
        // d_p^{-1/2} scale over many pairs.
        let d_p = 64;
        let ids = random_nonorthogonal_identifiers(40, d_p, RngSeed(7)).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..40 {
            for j in (i + 1)..40 {
                let dot: f64 = ids
                    .p
                    .row(i)
                    .iter()
                    .zip(ids.p.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                total += dot.abs();
                count += 1;
            }
        }
        let mean = total / count as f64;
        let scale = 1.0 / (d_p as f64).sqrt();
        assert!(mean > 0.3 * scale && mean < 2.0 * scale, "mean |dot| {mean}");
    }

    #[test]
    fn random_deterministic() {
        let a = random_nonorthogonal_identifiers(5, 4, RngSeed(8)).unwrap();
        let b = random_nonorthogonal_identifiers(5, 4, RngSeed(8)).unwrap();
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn sign_flip_preserves_gram() {
        let g = barabasi_albert(6, 2, RngSeed(9)).unwrap();
        let ids = lap_identifiers(&g, 6).unwrap();
        let flipped = sign_flip_augment(&ids, RngSeed(10)).unwrap();
        let gram_a = ids.p.matmul_transpose(&ids.p).unwrap();
        let gram_b = flipped.p.matmul_transpose(&flipped.p).unwrap();
        assert!(gram_a.max_abs_diff(&gram_b) < 1e-12);
    }

    #[test]
    fn sign_flip_rejects_wrong_kind() {
        let ids = orf_identifiers(4, 4, RngSeed(11)).unwrap();
        assert!(sign_flip_augment(&ids, RngSeed(0)).is_err());
    }

    #[test]
    fn sign_flip_deterministic() {
        let g = barabasi_albert(5, 2, RngSeed(12)).unwrap();
        let ids = lap_identifiers(&g, 5).unwrap();
        let a = sign_flip_augment(&ids, RngSeed(3)).unwrap();
        let b = sign_flip_augment(&ids, RngSeed(3)).unwrap();
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let ids = orf_identifiers(4, 4, RngSeed(13)).unwrap();
        let out = eigvec_dropout(&ids, 0.0, RngSeed(1)).unwrap();
        assert_eq!(out.p, ids.p);
    }

    #[test]
    fn dropout_mean_preserves_input() {
        let ids = orf_identifiers(4, 6, RngSeed(14)).unwrap();
        let mut acc = Matrix::zeros(4, 6);
        let trials = 4000;
        for t in 0..trials {
            let out = eigvec_dropout(&ids, 0.5, RngSeed(100).child(t)).unwrap();
            acc.add_assign(&out.p).unwrap();
        }
        acc.scale(1.0 / trials as f64);
        assert!(acc.max_abs_diff(&ids.p) < 0.05);
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let ids = orf_identifiers(3, 3, RngSeed(15)).unwrap();
        assert!(eigvec_dropout(&ids, 1.0, RngSeed(0)).is_err());
    }

    #[test]
    fn augmentations_commute_with_row_permutation() {
        let g = barabasi_albert(6, 2, RngSeed(16)).unwrap();
        let ids = lap_identifiers(&g, 6).unwrap();
        let pi = [3usize, 0, 5, 1, 4, 2];
        let permute_rows = |m: &Matrix| {
            let mut out = Matrix::zeros(m.rows(), m.cols());
            for (i, &p) in pi.iter().enumerate() {
                out.row_mut(p).copy_from_slice(m.row(i));
            }
            out
        };
        let flip_then_permute = permute_rows(&sign_flip_augment(&ids, RngSeed(4)).unwrap().p);
        let permuted = NodeIdentifiers {
            p: permute_rows(&ids.p),
            kind: IdentifierKind::Laplacian,
        };
        let permute_then_flip = sign_flip_augment(&permuted, RngSeed(4)).unwrap().p;
        assert!(flip_then_permute.max_abs_diff(&permute_then_flip) < 1e-15);
    }

    #[test]
    fn equispaced_k2() {
        let t = equispaced_type_identifiers(2, 4).unwrap();
        assert_eq!(t.num_types(), 2);
        assert!((t.e.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((t.e.get(1, 0) + 1.0).abs() < 1e-12);
        let dot: f64 = t.e.row(0).iter().zip(t.e.row(1)).map(|(a, b)| a * b).sum();
        assert!((dot + 1.0).abs() < 1e-12);
        assert!((type_identifier_margin(2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn equispaced_k3_max_dot() {
        let t = equispaced_type_identifiers(3, 2).unwrap();
        assert_eq!(t.num_types(), 5);
        let mut max_dot = f64::NEG_INFINITY;
        for i in 0..5 {
            let norm: f64 = t.e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            for j in 0..5 {
                if i != j {
                    let dot: f64 = t.e.row(i).iter().zip(t.e.row(j)).map(|(a, b)| a * b).sum();
                    max_dot = max_dot.max(dot);
                }
            }
        }
        let expect = (2.0 * std::f64::consts::PI / 5.0).cos();
        assert!((max_dot - expect).abs() < 1e-12);
        assert!((expect - 0.309).abs() < 1e-3);
    }

    #[test]
    fn equispaced_rejects_narrow() {
        assert!(equispaced_type_identifiers(2, 1).is_err());
    }
}
