//! Conversion of graphs and dense tensors into token sequences.
//!
//! Every non-special token carries channels laid out as
//! `[features | node identifier slots (k of them) | type identifier]` plus
//! the multi-index it represents. Special tokens carry a dedicated embedding
//! that bypasses the input projection.

use thiserror::Error;

use crate::equivariant::{class_index, EquivalenceClass};
use crate::graphs::{DenseTensor, Graph};
use crate::identifiers::{NodeIdentifiers, TypeIdentifiers};
use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("identifier rows {got} do not match node count {expected}")]
    IdentifierRows { expected: usize, got: usize },
    #[error("type identifiers have {got} rows, expected {expected}")]
    TypeRows { expected: usize, got: usize },
    #[error("duplicate special token of kind {0:?}")]
    DuplicateSpecial(TokenKind),
    #[error("channel width mismatch: {0}")]
    Width(String),
    #[error("token sequence missing required metadata: {0}")]
    Metadata(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum TokenKind {
    Node,
    Edge,
    Hyperedge,
    GraphSpecial,
    NullSpecial,
}

impl TokenKind {
    pub fn is_special(self) -> bool {
        matches!(self, TokenKind::GraphSpecial | TokenKind::NullSpecial)
    }
}

#[derive(Debug, Clone)]
pub struct Token {
    pub kind: TokenKind,
    /// Node indices this token represents; empty for special tokens. Node
    /// tokens at order 2 use the repeated form `(v, v)`.
    pub multi_index: Vec<usize>,
    /// Raw channels for ordinary tokens; the dedicated embedding (already in
    /// model space) for special tokens.
    pub channels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub n: usize,
    pub k: usize,
    pub feat_dim: usize,
    pub d_p: usize,
    pub d_e: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_specials(&self) -> usize {
        self.tokens.iter().filter(|t| t.kind.is_special()).count()
    }

    /// Width of the raw channel vector on non-special tokens.
    pub fn channel_width(&self) -> usize {
        self.feat_dim + self.k * self.d_p + self.d_e
    }
}

fn dense_kind(idx: &[usize]) -> TokenKind {
    if idx.len() == 1 || idx.iter().all(|&i| i == idx[0]) {
        TokenKind::Node
    } else if idx.len() == 2 {
        TokenKind::Edge
    } else {
        TokenKind::Hyperedge
    }
}

fn build_channels(
    features: &[f64],
    idx: &[usize],
    p: &NodeIdentifiers,
    type_row: &[f64],
    width: usize,
) -> Vec<f64> {
    let mut channels = Vec::with_capacity(width);
    channels.extend_from_slice(features);
    for &i in idx {
        channels.extend_from_slice(p.p.row(i));
    }
    channels.extend_from_slice(type_row);
    channels
}

/// Tokenize a sparse graph at order 2: one token per node carrying
/// `[X_v, P_v, P_v, E_node]` and one per edge carrying `[X_(u,v), P_u, P_v,
/// E_edge]`; with `symmetrize` each edge also emits the reversed copy.
pub fn tokenize_sparse(
    g: &Graph,
    p: &NodeIdentifiers,
    e: &TypeIdentifiers,
    symmetrize: bool,
) -> Result<TokenSequence, TokenizeError> {
    if p.n() != g.n() {
        return Err(TokenizeError::IdentifierRows {
            expected: g.n(),
            got: p.n(),
        });
    }
    if e.num_types() != 2 {
        return Err(TokenizeError::TypeRows {
            expected: 2,
            got: e.num_types(),
        });
    }
    let c = g.feature_width();
    let width = c + 2 * p.width() + e.width();
    let zero_feat = vec![0.0; c];
    let mut tokens = Vec::with_capacity(g.n() + g.m() * (1 + symmetrize as usize));
    for v in 0..g.n() {
        let feat = g.node_features().map_or(zero_feat.as_slice(), |f| f.row(v));
        tokens.push(Token {
            kind: TokenKind::Node,
            multi_index: vec![v, v],
            channels: build_channels(feat, &[v, v], p, e.e.row(0), width),
        });
    }
    for (ei, &(u, v)) in g.edges().iter().enumerate() {
        let feat = g.edge_features().map_or(zero_feat.as_slice(), |f| f.row(ei));
        tokens.push(Token {
            kind: TokenKind::Edge,
            multi_index: vec![u, v],
            channels: build_channels(feat, &[u, v], p, e.e.row(1), width),
        });
    }
    if symmetrize {
        for (ei, &(u, v)) in g.edges().iter().enumerate() {
            let feat = g.edge_features().map_or(zero_feat.as_slice(), |f| f.row(ei));
            tokens.push(Token {
                kind: TokenKind::Edge,
                multi_index: vec![v, u],
                channels: build_channels(feat, &[v, u], p, e.e.row(1), width),
            });
        }
    }
    Ok(TokenSequence {
        tokens,
        n: g.n(),
        k: 2,
        feat_dim: c,
        d_p: p.width(),
        d_e: e.width(),
    })
}

/// Tokenize a dense order-`k` tensor: `n^k` tokens in row-major multi-index
/// order, each carrying `[X_i, P_{i_1}, ..., P_{i_k}, E_class(i)]`.
pub fn tokenize_dense(
    x: &DenseTensor,
    p: &NodeIdentifiers,
    e: &TypeIdentifiers,
) -> Result<TokenSequence, TokenizeError> {
    if p.n() != x.n() {
        return Err(TokenizeError::IdentifierRows {
            expected: x.n(),
            got: p.n(),
        });
    }
    let expected_types = crate::equivariant::bell_number(x.order())
        .map_err(|_| TokenizeError::Metadata("order out of range"))?;
    if e.num_types() != expected_types {
        return Err(TokenizeError::TypeRows {
            expected: expected_types,
            got: e.num_types(),
        });
    }
    let width = x.channels() + x.order() * p.width() + e.width();
    let mut tokens = Vec::with_capacity(x.num_entries());
    for flat in 0..x.num_entries() {
        let idx = x.multi_index(flat);
        let class = EquivalenceClass::of(&idx);
        let type_row = e.e.row(class_index(&class));
        tokens.push(Token {
            kind: dense_kind(&idx),
            multi_index: idx.clone(),
            channels: build_channels(x.entry(&idx), &idx, p, type_row, width),
        });
    }
    Ok(TokenSequence {
        tokens,
        n: x.n(),
        k: x.order(),
        feat_dim: x.channels(),
        d_p: p.width(),
        d_e: e.width(),
    })
}

/// Insert a special token at position 0 carrying `embedding` (a model-space
/// vector used verbatim by [`project_input`]).
pub fn prepend_special(
    ts: &TokenSequence,
    kind: TokenKind,
    embedding: Vec<f64>,
) -> Result<TokenSequence, TokenizeError> {
    if !kind.is_special() {
        return Err(TokenizeError::Metadata("kind is not a special token"));
    }
    if ts.tokens.iter().any(|t| t.kind == kind) {
        return Err(TokenizeError::DuplicateSpecial(kind));
    }
    let mut tokens = Vec::with_capacity(ts.len() + 1);
    tokens.push(Token {
        kind,
        multi_index: Vec::new(),
        channels: embedding,
    });
    tokens.extend(ts.tokens.iter().cloned());
    Ok(TokenSequence {
        tokens,
        ..ts.clone()
    })
}

/// Trainable input projection applied to raw token channels. Special tokens
/// bypass it and contribute their stored embedding directly.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InputProjection {
    pub w_in: Matrix,
}

impl InputProjection {
    pub fn d(&self) -> usize {
        self.w_in.cols()
    }
}

/// Project a token sequence to the model width: row `t` of the result is
/// `channels_t * w_in` for ordinary tokens and the stored embedding for
/// special tokens.
pub fn project_input(ts: &TokenSequence, proj: &InputProjection) -> Result<Matrix, TokenizeError> {
    let d = proj.d();
    let width = ts.channel_width();
    if proj.w_in.rows() != width {
        return Err(TokenizeError::Width(format!(
            "w_in has {} rows, token channels have width {}",
            proj.w_in.rows(),
            width
        )));
    }
    let mut out = Matrix::zeros(ts.len(), d);
    for (t, token) in ts.tokens.iter().enumerate() {
        if token.kind.is_special() {
            if token.channels.len() != d {
                return Err(TokenizeError::Width(format!(
                    "special embedding width {} != model width {}",
                    token.channels.len(),
                    d
                )));
            }
            out.row_mut(t).copy_from_slice(&token.channels);
        } else {
            let row = out.row_mut(t);
            for (i, &c) in token.channels.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(proj.w_in.row(i)) {
                    *o += c * w;
                }
            }
        }
    }
    Ok(out)
}
