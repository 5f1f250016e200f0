//! Multihead self-attention, transformer layers, kernelized linear
//! attention, manual gradients for the attention-score path, and the
//! attention-distance analysis.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::UNREACHABLE;
use crate::numerics::{
    gaussian_matrix, matmul_into, matmul_nt_into, matmul_tn_into, qr_orthonormal, softmax_rows,
    Matrix, NumericsError, RngSeed,
};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kernel attention denominator vanished at row {row}")]
    ZeroDenominator { row: usize },
    #[error("no token pair with a finite hop distance")]
    NoFinitePairs,
    #[error("backward pass supports norm mode `none` and learned feedforward only")]
    Untrainable,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-head projection parameters. Query and key projections carry biases;
/// value and output projections do not.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    pub w_k: Matrix,
    pub b_k: Vec<f64>,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

/// Multihead self-attention parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MSAParams {
    pub d: usize,
    pub d_h: usize,
    pub d_v: usize,
    pub heads: Vec<HeadParams>,
}

impl MSAParams {
    pub fn zeros(h: usize, d: usize, d_h: usize, d_v: usize) -> MSAParams {
        MSAParams {
            d,
            d_h,
            d_v,
            heads: (0..h)
                .map(|_| HeadParams {
                    w_q: Matrix::zeros(d, d_h),
                    b_q: vec![0.0; d_h],
                    w_k: Matrix::zeros(d, d_h),
                    b_k: vec![0.0; d_h],
                    w_v: Matrix::zeros(d, d_v),
                    w_o: Matrix::zeros(d_v, d),
                })
                .collect(),
        }
    }

    pub fn random(h: usize, d: usize, d_h: usize, d_v: usize, seed: RngSeed) -> MSAParams {
        let mut p = MSAParams::zeros(h, d, d_h, d_v);
        for (i, head) in p.heads.iter_mut().enumerate() {
            let s = seed.child(i as u64);
            let scale = 1.0 / (d as f64).sqrt();
            head.w_q = scaled_gaussian(d, d_h, scale, s.child(0));
            head.w_k = scaled_gaussian(d, d_h, scale, s.child(1));
            head.w_v = scaled_gaussian(d, d_v, scale, s.child(2));
            head.w_o = scaled_gaussian(d_v, d, 1.0 / (d_v as f64).sqrt(), s.child(3));
        }
        p
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn check_input(&self, x: &Matrix) -> Result<(), AttentionError> {
        if x.cols() != self.d {
            return Err(AttentionError::Shape(format!(
                "input width {} != model width {}",
                x.cols(),
                self.d
            )));
        }
        Ok(())
    }
}

fn scaled_gaussian(rows: usize, cols: usize, scale: f64, seed: RngSeed) -> Matrix {
    let mut g = gaussian_matrix(rows, cols, seed).expect("nonzero dims");
    g.scale(scale);
    g
}

fn affine(x: &Matrix, w: &Matrix, b: Option<&[f64]>) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    if let Some(b) = b {
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(b);
        }
    }
    matmul_into(out.data_mut(), x.data(), w.data(), x.rows(), x.cols(), w.cols());
    out
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (s, &v) in sums.iter_mut().zip(m.row(i)) {
            *s += v;
        }
    }
    sums
}

/// Attention coefficients of one head: row softmax of the scaled biased
/// query/key dot products.
pub fn head_attention(x: &Matrix, head: &HeadParams, d_h: usize) -> Matrix {
    let q = affine(x, &head.w_q, Some(&head.b_q));
    let k = affine(x, &head.w_k, Some(&head.b_k));
    let mut logits = q.matmul_transpose(&k).expect("shape");
    logits.scale(1.0 / (d_h as f64).sqrt());
    softmax_rows(&logits)
}

/// Multihead self-attention forward pass. Returns the output and the
/// per-head attention matrices for supervision and analysis.
pub fn msa_forward(x: &Matrix, p: &MSAParams) -> Result<(Matrix, Vec<Matrix>), AttentionError> {
    p.check_input(x)?;
    let n = x.rows();
    let mut out = Matrix::zeros(n, p.d);
    let mut attn = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let a = head_attention(x, head, p.d_h);
        let values = affine(x, &head.w_v, None);
        let mixed = a.matmul(&values)?;
        let contribution = mixed.matmul(&head.w_o)?;
        out.add_assign(&contribution)?;
        attn.push(a);
    }
    Ok((out, attn))
}

/// Tokenwise map used in place of a learned feedforward block when a layer
/// is built from a closed-form construction.
pub trait TokenwiseMap: std::fmt::Debug {
    fn apply_row(&self, row: &[f64]) -> Vec<f64>;
}

/// Two affine maps with a GeLU between them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedMlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl LearnedMlp {
    pub fn random(d: usize, d_f: usize, seed: RngSeed) -> LearnedMlp {
        LearnedMlp {
            w1: scaled_gaussian(d, d_f, 1.0 / (d as f64).sqrt(), seed.child(0)),
            b1: vec![0.0; d_f],
            w2: scaled_gaussian(d_f, d, 1.0 / (d_f as f64).sqrt(), seed.child(1)),
            b2: vec![0.0; d],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut hidden = affine(x, &self.w1, Some(&self.b1));
        for v in hidden.data_mut() {
            *v = gelu(*v);
        }
        affine(&hidden, &self.w2, Some(&self.b2))
    }
}

// tanh form of GeLU.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone)]
pub enum MlpSpec {
    Learned(LearnedMlp),
    /// Closed-form tokenwise function replacing the learned block.
    Exact(Arc<dyn TokenwiseMap + Send + Sync>),
}

impl MlpSpec {
    pub fn forward(&self, x: &Matrix) -> Matrix {
        match self {
            MlpSpec::Learned(mlp) => mlp.forward(x),
            MlpSpec::Exact(f) => {
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    out.row_mut(i).copy_from_slice(&f.apply_row(x.row(i)));
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    None,
    Pre,
}

/// Rowwise layer normalization with trainable gain and bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        const EPS: f64 = 1e-12;
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gain[j] + self.bias[j];
            }
        }
        out
    }
}

/// One transformer layer: residual self-attention followed by a residual
/// tokenwise feedforward block (learned or closed-form).
#[derive(Debug, Clone)]
pub struct TransformerLayerParams {
    pub msa: MSAParams,
    pub mlp: MlpSpec,
    pub norm: NormMode,
    pub norm1: Option<LayerNormParams>,
    pub norm2: Option<LayerNormParams>,
}

impl TransformerLayerParams {
    pub fn without_norm(msa: MSAParams, mlp: MlpSpec) -> TransformerLayerParams {
        TransformerLayerParams {
            msa,
            mlp,
            norm: NormMode::None,
            norm1: None,
            norm2: None,
        }
    }
}

pub fn transformer_layer_forward(
    x: &Matrix,
    p: &TransformerLayerParams,
) -> Result<Matrix, AttentionError> {
    let (h, _) = transformer_layer_forward_with_attention(x, p)?;
    Ok(h)
}

pub fn transformer_layer_forward_with_attention(
    x: &Matrix,
    p: &TransformerLayerParams,
) -> Result<(Matrix, Vec<Matrix>), AttentionError> {
    let msa_in = match p.norm {
        NormMode::None => x.clone(),
        NormMode::Pre => p
            .norm1
            .as_ref()
            .ok_or_else(|| AttentionError::Shape("pre-norm layer missing norm1".into()))?
            .forward(x),
    };
    let (msa_out, attn) = msa_forward(&msa_in, &p.msa)?;
    let mut h = x.clone();
    h.add_assign(&msa_out)?;
    let mlp_in = match p.norm {
        NormMode::None => h.clone(),
        NormMode::Pre => p
            .norm2
            .as_ref()
            .ok_or_else(|| AttentionError::Shape("pre-norm layer missing norm2".into()))?
            .forward(&h),
    };
    let mlp_out = p.mlp.forward(&mlp_in);
    h.add_assign(&mlp_out)?;
    Ok((h, attn))
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Gradients for the attention-score path of one head.
#[derive(Debug, Clone)]
pub struct HeadScoreGrads {
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    pub w_k: Matrix,
    pub b_k: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScoreGrads {
    pub heads: Vec<HeadScoreGrads>,
    pub x: Matrix,
}

/// Reverse through a row softmax: given `a = softmax(s)` rowwise and
/// upstream `da`, produce `ds_i = a_i .* (da_i - <da_i, a_i>)`.
fn softmax_backward(a: &Matrix, da: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let arow = a.row(i);
        let drow = da.row(i);
        let dot: f64 = arow.iter().zip(drow).map(|(&av, &dv)| av * dv).sum();
        for (out, (&av, &dv)) in ds.row_mut(i).iter_mut().zip(arow.iter().zip(drow)) {
            *out = av * (dv - dot);
        }
    }
    ds
}

/// Cached activations of the attention-score path, reusable by the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ScoreForward {
    pub alphas: Vec<Matrix>,
    queries: Vec<Matrix>,
    keys: Vec<Matrix>,
}

/// Per-head attention matrices plus the intermediates the reverse pass
/// needs.
pub fn attention_score_forward(x: &Matrix, p: &MSAParams) -> Result<ScoreForward, AttentionError> {
    p.check_input(x)?;
    let scale = 1.0 / (p.d_h as f64).sqrt();
    let mut alphas = Vec::with_capacity(p.heads.len());
    let mut queries = Vec::with_capacity(p.heads.len());
    let mut keys = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = affine(x, &head.w_q, Some(&head.b_q));
        let k = affine(x, &head.w_k, Some(&head.b_k));
        let mut logits = q.matmul_transpose(&k)?;
        logits.scale(scale);
        alphas.push(softmax_rows(&logits));
        queries.push(q);
        keys.push(k);
    }
    Ok(ScoreForward {
        alphas,
        queries,
        keys,
    })
}

/// Reverse pass of the attention-score path from cached activations.
pub fn attention_score_backward(
    x: &Matrix,
    p: &MSAParams,
    fwd: &ScoreForward,
    upstream: &[Matrix],
) -> Result<ScoreGrads, AttentionError> {
    p.check_input(x)?;
    if upstream.len() != p.heads.len() {
        return Err(AttentionError::Shape(format!(
            "{} upstream matrices for {} heads",
            upstream.len(),
            p.heads.len()
        )));
    }
    let n = x.rows();
    let scale = 1.0 / (p.d_h as f64).sqrt();
    let mut dx = Matrix::zeros(n, p.d);
    let mut heads = Vec::with_capacity(p.heads.len());
    for (h, (head, up)) in p.heads.iter().zip(upstream).enumerate() {
        if up.shape() != (n, n) {
            return Err(AttentionError::Shape(format!(
                "upstream shape {:?}, expected ({n}, {n})",
                up.shape()
            )));
        }
        let a = &fwd.alphas[h];
        let q = &fwd.queries[h];
        let k = &fwd.keys[h];
        let mut ds = softmax_backward(a, up);
        ds.scale(scale);
        // dQ = dS K, dK = dS^T Q.
        let dq = ds.matmul(k)?;
        let mut dk = Matrix::zeros(n, p.d_h);
        matmul_tn_into(dk.data_mut(), ds.data(), q.data(), n, n, p.d_h);

        let mut dwq = Matrix::zeros(p.d, p.d_h);
        matmul_tn_into(dwq.data_mut(), x.data(), dq.data(), p.d, n, p.d_h);
        let mut dwk = Matrix::zeros(p.d, p.d_h);
        matmul_tn_into(dwk.data_mut(), x.data(), dk.data(), p.d, n, p.d_h);
        let dbq = column_sums(&dq);
        let dbk = column_sums(&dk);
        let mut dxh = Matrix::zeros(n, p.d);
        matmul_nt_into(dxh.data_mut(), dq.data(), head.w_q.data(), n, p.d_h, p.d);
        matmul_nt_into(dxh.data_mut(), dk.data(), head.w_k.data(), n, p.d_h, p.d);
        dx.add_assign(&dxh)?;
        heads.push(HeadScoreGrads {
            w_q: dwq,
            b_q: dbq,
            w_k: dwk,
            b_k: dbk,
        });
    }
    Ok(ScoreGrads { heads, x: dx })
}

/// Closed-form reverse pass from per-head attention-matrix gradients to the
/// query/key parameters and the input. `upstream[h]` is dLoss/d(alpha^h).
pub fn attention_score_gradients(
    x: &Matrix,
    p: &MSAParams,
    upstream: &[Matrix],
) -> Result<ScoreGrads, AttentionError> {
    let fwd = attention_score_forward(x, p)?;
    attention_score_backward(x, p, &fwd, upstream)
}

/// Full per-head gradients of a multihead self-attention layer.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    pub w_k: Matrix,
    pub b_k: Vec<f64>,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone)]
pub struct MsaGrads {
    pub heads: Vec<HeadGrads>,
    pub x: Matrix,
}

/// Full reverse pass of [`msa_forward`] given the output gradient.
pub fn msa_backward(x: &Matrix, p: &MSAParams, dout: &Matrix) -> Result<MsaGrads, AttentionError> {
    p.check_input(x)?;
    let n = x.rows();
    let scale = 1.0 / (p.d_h as f64).sqrt();
    let mut dx = Matrix::zeros(n, p.d);
    let mut heads = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = affine(x, &head.w_q, Some(&head.b_q));
        let k = affine(x, &head.w_k, Some(&head.b_k));
        let values = affine(x, &head.w_v, None);
        let mut logits = q.matmul_transpose(&k)?;
        logits.scale(scale);
        let a = softmax_rows(&logits);
        let mixed = a.matmul(&values)?;

        // out += mixed w_o
        let mut dwo = Matrix::zeros(p.d_v, p.d);
        matmul_tn_into(dwo.data_mut(), mixed.data(), dout.data(), p.d_v, n, p.d);
        let mut dmixed = Matrix::zeros(n, p.d_v);
        matmul_nt_into(dmixed.data_mut(), dout.data(), head.w_o.data(), n, p.d, p.d_v);
        // mixed = A V
        let da = dmixed.matmul_transpose(&values)?;
        let mut dvalues = Matrix::zeros(n, p.d_v);
        matmul_tn_into(dvalues.data_mut(), a.data(), dmixed.data(), n, n, p.d_v);
        let mut dwv = Matrix::zeros(p.d, p.d_v);
        matmul_tn_into(dwv.data_mut(), x.data(), dvalues.data(), p.d, n, p.d_v);
        let mut dxh = Matrix::zeros(n, p.d);
        matmul_nt_into(dxh.data_mut(), dvalues.data(), head.w_v.data(), n, p.d_v, p.d);

        let mut ds = softmax_backward(&a, &da);
        ds.scale(scale);
        let dq = ds.matmul(&k)?;
        let mut dk = Matrix::zeros(n, p.d_h);
        matmul_tn_into(dk.data_mut(), ds.data(), q.data(), n, n, p.d_h);
        let mut dwq = Matrix::zeros(p.d, p.d_h);
        matmul_tn_into(dwq.data_mut(), x.data(), dq.data(), p.d, n, p.d_h);
        let mut dwk = Matrix::zeros(p.d, p.d_h);
        matmul_tn_into(dwk.data_mut(), x.data(), dk.data(), p.d, n, p.d_h);
        matmul_nt_into(dxh.data_mut(), dq.data(), head.w_q.data(), n, p.d_h, p.d);
        matmul_nt_into(dxh.data_mut(), dk.data(), head.w_k.data(), n, p.d_h, p.d);
        dx.add_assign(&dxh)?;
        heads.push(HeadGrads {
            w_q: dwq,
            b_q: column_sums(&dq),
            w_k: dwk,
            b_k: column_sums(&dk),
            w_v: dwv,
            w_o: dwo,
        });
    }
    Ok(MsaGrads { heads, x: dx })
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub heads: Vec<HeadGrads>,
    pub mlp: MlpGrads,
    pub x: Matrix,
}

/// Reverse pass of a norm-free transformer layer with a learned feedforward
/// block. Pre-norm layers are forward-only.
pub fn transformer_layer_backward(
    x: &Matrix,
    p: &TransformerLayerParams,
    dout: &Matrix,
) -> Result<LayerGrads, AttentionError> {
    if p.norm != NormMode::None {
        return Err(AttentionError::Untrainable);
    }
    let mlp = match &p.mlp {
        MlpSpec::Learned(mlp) => mlp,
        MlpSpec::Exact(_) => return Err(AttentionError::Untrainable),
    };
    // Recompute forward intermediates.
    let (msa_out, _) = msa_forward(x, &p.msa)?;
    let mut h = x.clone();
    h.add_assign(&msa_out)?;
    let pre1 = affine(&h, &mlp.w1, Some(&mlp.b1));
    let mut hidden = pre1.clone();
    for v in hidden.data_mut() {
        *v = gelu(*v);
    }
    let n = x.rows();
    let d_f = mlp.w1.cols();

    // y = h + mlp(h)
    let mut dw2 = Matrix::zeros(d_f, p.msa.d);
    matmul_tn_into(dw2.data_mut(), hidden.data(), dout.data(), d_f, n, p.msa.d);
    let db2 = column_sums(dout);
    let mut dhidden = Matrix::zeros(n, d_f);
    matmul_nt_into(dhidden.data_mut(), dout.data(), mlp.w2.data(), n, p.msa.d, d_f);
    for (dv, &uv) in dhidden.data_mut().iter_mut().zip(pre1.data()) {
        *dv *= gelu_grad(uv);
    }
    let mut dw1 = Matrix::zeros(p.msa.d, d_f);
    matmul_tn_into(dw1.data_mut(), h.data(), dhidden.data(), p.msa.d, n, d_f);
    let db1 = column_sums(&dhidden);
    let mut dh = dout.clone();
    let mut dh_extra = Matrix::zeros(n, p.msa.d);
    matmul_nt_into(dh_extra.data_mut(), dhidden.data(), mlp.w1.data(), n, d_f, p.msa.d);
    dh.add_assign(&dh_extra)?;

    // h = x + msa(x)
    let msa_grads = msa_backward(x, &p.msa, &dh)?;
    let mut dx = dh;
    dx.add_assign(&msa_grads.x)?;
    Ok(LayerGrads {
        heads: msa_grads.heads,
        mlp: MlpGrads {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
        x: dx,
    })
}

// ---------------------------------------------------------------------------
// Kernelized attention
// ---------------------------------------------------------------------------

/// Configuration of the positive softmax-kernel random feature map.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelAttentionConfig {
    pub feature_count: usize,
    pub seed: RngSeed,
}

/// Number of f64 values the kernelized path allocates: the feature matrix,
/// feature maps for queries and keys, pooled key/value statistics, and the
/// output. No n_q x n_k buffer appears.
pub fn favor_workspace_floats(n_q: usize, n_k: usize, d: usize, d_v: usize, m_f: usize) -> usize {
    m_f * d + n_q * m_f + n_k * m_f + m_f * (d_v + 1) + n_q * d_v + n_q + n_k
}

/// Number of f64 values the exact path allocates: the logit matrix, its
/// softmax, and the output.
pub fn exact_workspace_floats(n_q: usize, n_k: usize, d_v: usize) -> usize {
    2 * n_q * n_k + n_q * d_v
}

/// Exact softmax attention `softmax(Q K^T / sqrt(d)) V`, the reference the
/// kernelized path approximates.
pub fn exact_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix, AttentionError> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(AttentionError::Shape("q/k/v shapes inconsistent".into()));
    }
    let mut logits = q.matmul_transpose(k)?;
    logits.scale(1.0 / (q.cols() as f64).sqrt());
    Ok(softmax_rows(&logits).matmul(v)?)
}

// Gaussian feature directions orthogonalized blockwise via QR, with row
// norms redrawn from the Gaussian norm distribution so each row keeps the
// marginal law of an isotropic Gaussian.
fn orthogonal_feature_matrix(m_f: usize, d: usize, seed: RngSeed) -> Matrix {
    let mut omega = Matrix::zeros(m_f, d);
    let mut produced = 0;
    let mut block_id = 0u64;
    while produced < m_f {
        let g = gaussian_matrix(d, d, seed.child(block_id)).expect("d > 0");
        let q = match qr_orthonormal(&g) {
            Ok(q) => q,
            Err(_) => {
                block_id += 1;
                continue;
            }
        };
        let take = d.min(m_f - produced);
        let norms = gaussian_matrix(take, d, seed.child(block_id).child(7)).expect("d > 0");
        for r in 0..take {
            let norm: f64 = norms.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..d {
                omega.set(produced + r, c, q.get(c, r) * norm);
            }
        }
        produced += take;
        block_id += 1;
    }
    omega
}

/// Positive feature map `phi(x)_f = exp(omega_f . x - |x|^2/2 - stab) / sqrt(m_f)`.
fn positive_features(x: &Matrix, omega: &Matrix, stab: &[f64]) -> Matrix {
    let m_f = omega.rows();
    let mut proj = x.matmul_transpose(omega).expect("shape");
    let inv_sqrt = 1.0 / (m_f as f64).sqrt();
    for i in 0..x.rows() {
        let sq: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>() / 2.0;
        for v in proj.row_mut(i) {
            *v = (*v - sq - stab[i]).exp() * inv_sqrt;
        }
    }
    proj
}

/// Kernelized softmax attention with positive orthogonal random features:
/// `phi(Q) (phi(K)^T V)` divided rowwise by `phi(Q) (phi(K)^T 1)`, never
/// materializing an attention matrix.
pub fn favor_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &KernelAttentionConfig,
) -> Result<Matrix, AttentionError> {
    if q.cols() != k.cols() {
        return Err(AttentionError::Shape(format!(
            "query width {} != key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(AttentionError::Shape(format!(
            "{} keys but {} value rows",
            k.rows(),
            v.rows()
        )));
    }
    let d = q.cols();
    let m_f = cfg.feature_count.max(1);
    // Fold the 1/sqrt(d) softmax temperature into the inputs.
    let temp = 1.0 / (d as f64).powf(0.25);
    let mut qs = q.clone();
    qs.scale(temp);
    let mut ks = k.clone();
    ks.scale(temp);
    let omega = orthogonal_feature_matrix(m_f, d, cfg.seed);

    // Stabilizers cancel in the ratio: per-row max exponent for queries, a
    // single global max exponent shared by all keys.
    let exponent_max = |m: &Matrix| -> Vec<f64> {
        let proj = m.matmul_transpose(&omega).expect("shape");
        (0..m.rows())
            .map(|i| {
                let sq: f64 = m.row(i).iter().map(|v| v * v).sum::<f64>() / 2.0;
                proj.row(i).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - sq
            })
            .collect()
    };
    let q_stab = exponent_max(&qs);
    let k_global = exponent_max(&ks)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let k_stab = vec![k_global; ks.rows()];

    let phi_q = positive_features(&qs, &omega, &q_stab);
    let phi_k = positive_features(&ks, &omega, &k_stab);

    let mut kv = Matrix::zeros(m_f, v.cols());
    matmul_tn_into(kv.data_mut(), phi_k.data(), v.data(), m_f, k.rows(), v.cols());
    let ksum = column_sums(&phi_k);

    let mut out = phi_q.matmul(&kv)?;
    for i in 0..out.rows() {
        let den_raw: f64 = phi_q.row(i).iter().zip(&ksum).map(|(&a, &b)| a * b).sum();
        // Denominator floored at 1e-9 before dividing.
        let den = den_raw.max(1e-9);
        if !den.is_finite() || den <= 0.0 {
            return Err(AttentionError::ZeroDenominator { row: i });
        }
        for val in out.row_mut(i) {
            *val /= den;
        }
    }
    if !out.is_finite() {
        return Err(AttentionError::Numerics(NumericsError::NonFinite {
            op: "favor_attention",
        }));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Attention-distance analysis
// ---------------------------------------------------------------------------

fn token_anchor(multi_index: &[usize]) -> Vec<usize> {
    let mut anchors: Vec<usize> = multi_index.to_vec();
    anchors.sort_unstable();
    anchors.dedup();
    anchors
}

// Mean hop distance between two anchor sets; unreachable if any anchor pair
// is unreachable (anchor sets straddle components together or not at all).
fn pair_distance(a: &[usize], b: &[usize], hops: &Matrix) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for &u in a {
        for &v in b {
            let d = hops.get(u, v);
            if d == UNREACHABLE {
                return UNREACHABLE;
            }
            total += d;
            count += 1.0;
        }
    }
    total / count
}

/// Mean attention distance in hops per head: for every query token, sum the
/// attention weights times the query/key anchor distance, renormalizing over
/// keys with a finite distance; special tokens are excluded entirely.
pub fn attention_distance(
    attn: &[Matrix],
    ts: &TokenSequence,
    hops: &Matrix,
) -> Result<Vec<f64>, AttentionError> {
    let n_tok = ts.len();
    let anchors: Vec<Option<Vec<usize>>> = ts
        .tokens
        .iter()
        .map(|t| {
            if t.kind.is_special() {
                None
            } else {
                Some(token_anchor(&t.multi_index))
            }
        })
        .collect();
    let mut dist = vec![UNREACHABLE; n_tok * n_tok];
    for i in 0..n_tok {
        if let Some(ai) = &anchors[i] {
            for j in 0..n_tok {
                if let Some(aj) = &anchors[j] {
                    dist[i * n_tok + j] = pair_distance(ai, aj, hops);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(attn.len());
    for a in attn {
        if a.shape() != (n_tok, n_tok) {
            return Err(AttentionError::Shape(format!(
                "attention shape {:?} does not match {} tokens",
                a.shape(),
                n_tok
            )));
        }
        let mut total = 0.0;
        let mut queries = 0.0;
        for i in 0..n_tok {
            if anchors[i].is_none() {
                continue;
            }
            let mut weight = 0.0;
            let mut acc = 0.0;
            for j in 0..n_tok {
                let d = dist[i * n_tok + j];
                if d == UNREACHABLE {
                    continue;
                }
                let w = a.get(i, j);
                weight += w;
                acc += w * d;
            }
            if weight > 0.0 {
                total += acc / weight;
                queries += 1.0;
            }
        }
        if queries == 0.0 {
            return Err(AttentionError::NoFinitePairs);
        }
        out.push(total / queries);
    }
    Ok(out)
}

/// CSV export of one attention matrix: a header row labelling every token by
/// kind and node indices, then one row per query token.
pub fn attention_to_csv(attn: &Matrix, ts: &TokenSequence) -> String {
    let label = |t: &crate::tokenizer::Token| -> String {
        match t.kind {
            crate::tokenizer::TokenKind::GraphSpecial => "[graph]".into(),
            crate::tokenizer::TokenKind::NullSpecial => "[null]".into(),
            crate::tokenizer::TokenKind::Node => format!("n{}", t.multi_index[0]),
            _ => {
                let parts: Vec<String> = t.multi_index.iter().map(|i| i.to_string()).collect();
                format!("e{}", parts.join("-"))
            }
        }
    };
    let mut out = String::from("query");
    for t in &ts.tokens {
        write!(out, ",{}", label(t)).unwrap();
    }
    out.push('\n');
    for i in 0..attn.rows() {
        write!(out, "{}", label(&ts.tokens[i])).unwrap();
        for j in 0..attn.cols() {
            write!(out, ",{}", attn.get(i, j)).unwrap();
        }
        out.push('\n');
    }
    out
}
