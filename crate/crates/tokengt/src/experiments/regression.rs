//! Structure-sensitive regression ablation: a small two-layer token
//! transformer regresses the triangle count of preferential-attachment
//! graphs from a graph-level readout token, once with orthogonal node
//! identifiers plus type identifiers and once with neither. Without
//! identifiers every node/edge token is indistinguishable, so the model can
//! at best predict a function of the token counts; the conditional-variance
//! oracle quantifies that ceiling exactly.

use serde::{Deserialize, Serialize};

use crate::attention::{
    transformer_layer_backward, transformer_layer_forward_with_attention, HeadGrads, LearnedMlp,
    MSAParams, MlpGrads, MlpSpec, TransformerLayerParams,
};
use crate::graphs::{hop_distances, Graph};
use crate::identifiers::{orf_identifiers, IdentifierKind, NodeIdentifiers, TypeIdentifiers};
use crate::numerics::{
    gaussian_matrix, matmul_into, matmul_nt_into, matmul_tn_into, AdamWConfig, AdamWState, Matrix,
    RngSeed,
};
use crate::tokenizer::{prepend_special, tokenize_sparse, TokenKind, TokenSequence};

use super::data::{ba_dataset, conditional_variance_bound, StandardizedTargets};
use super::ExperimentError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub with_identifiers: bool,
    pub d: usize,
    pub d_h: usize,
    pub d_f: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_p: usize,
    pub d_e: usize,
    pub steps: usize,
    pub warmup: usize,
    pub peak_lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub train_graphs: usize,
    pub test_graphs: usize,
    pub seed: u64,
}

impl RegressionConfig {
    pub fn desk_default(with_identifiers: bool, seed: u64) -> RegressionConfig {
        RegressionConfig {
            with_identifiers,
            d: 48,
            d_h: 16,
            d_f: 96,
            heads: 4,
            layers: 2,
            d_p: 24,
            d_e: 16,
            steps: 600,
            warmup: 100,
            peak_lr: 1e-3,
            batch: 32,
            weight_decay: 0.0,
            train_graphs: 256,
            test_graphs: 64,
            seed,
        }
    }

    pub fn token_width(&self) -> usize {
        2 * self.d_p + self.d_e
    }
}

/// Two-layer token transformer with a linear head on the graph token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionModel {
    pub w_in: Matrix,
    pub graph_emb: Vec<f64>,
    pub type_ids: Option<Matrix>,
    pub layers: Vec<(MSAParams, LearnedMlp)>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
    pub cfg: RegressionConfig,
}

impl RegressionModel {
    pub fn init(cfg: &RegressionConfig, seed: RngSeed) -> RegressionModel {
        let w = cfg.token_width();
        let mut w_in = gaussian_matrix(w, cfg.d, seed.child(0)).unwrap();
        w_in.scale(1.0 / (w as f64).sqrt());
        let mut graph_emb = gaussian_matrix(1, cfg.d, seed.child(1)).unwrap().data().to_vec();
        for v in graph_emb.iter_mut() {
            *v *= 0.5;
        }
        let type_ids = cfg.with_identifiers.then(|| {
            let mut e = gaussian_matrix(2, cfg.d_e, seed.child(2)).unwrap();
            e.scale(0.5);
            e
        });
        let layers = (0..cfg.layers)
            .map(|i| {
                (
                    MSAParams::random(cfg.heads, cfg.d, cfg.d_h, cfg.d_h, seed.child(10 + i as u64)),
                    LearnedMlp::random(cfg.d, cfg.d_f, seed.child(20 + i as u64)),
                )
            })
            .collect();
        let mut head_w = gaussian_matrix(1, cfg.d, seed.child(30)).unwrap().data().to_vec();
        for v in head_w.iter_mut() {
            *v *= 1.0 / (cfg.d as f64).sqrt();
        }
        RegressionModel {
            w_in,
            graph_emb,
            type_ids,
            layers,
            head_w,
            head_b: 0.0,
            cfg: cfg.clone(),
        }
    }

    fn layer_params(&self, i: usize) -> TransformerLayerParams {
        TransformerLayerParams::without_norm(
            self.layers[i].0.clone(),
            MlpSpec::Learned(self.layers[i].1.clone()),
        )
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.w_in.data_mut(), &mut self.graph_emb];
        if let Some(e) = &mut self.type_ids {
            v.push(e.data_mut());
        }
        for (msa, mlp) in &mut self.layers {
            for head in &mut msa.heads {
                v.push(head.w_q.data_mut());
                v.push(&mut head.b_q);
                v.push(head.w_k.data_mut());
                v.push(&mut head.b_k);
                v.push(head.w_v.data_mut());
                v.push(head.w_o.data_mut());
            }
            v.push(mlp.w1.data_mut());
            v.push(&mut mlp.b1);
            v.push(mlp.w2.data_mut());
            v.push(&mut mlp.b2);
        }
        v.push(&mut self.head_w);
        v.push(std::slice::from_mut(&mut self.head_b));
        v
    }

    /// Tokenize one graph under the model's identifier setting.
    pub fn tokenize(
        &self,
        g: &Graph,
        id_seed: RngSeed,
    ) -> Result<TokenSequence, ExperimentError> {
        let cfg = &self.cfg;
        let ids = if cfg.with_identifiers {
            orf_identifiers(g.n(), cfg.d_p, id_seed)?
        } else {
            NodeIdentifiers {
                p: Matrix::zeros(g.n(), cfg.d_p),
                kind: IdentifierKind::ExactOrthonormal,
            }
        };
        let type_ids = match &self.type_ids {
            Some(e) => TypeIdentifiers {
                e: e.clone(),
                trainable: true,
            },
            None => TypeIdentifiers {
                e: Matrix::zeros(2, cfg.d_e),
                trainable: false,
            },
        };
        let ts = tokenize_sparse(g, &ids, &type_ids, false)?;
        Ok(prepend_special(&ts, TokenKind::GraphSpecial, self.graph_emb.clone())?)
    }

    /// Prediction for one graph, plus intermediates for analysis.
    pub fn forward(
        &self,
        g: &Graph,
        id_seed: RngSeed,
    ) -> Result<(f64, Vec<Vec<Matrix>>), ExperimentError> {
        let ts = self.tokenize(g, id_seed)?;
        let channels = channel_matrix(&ts);
        let x = self.project(&channels);
        let mut h = x;
        let mut attn = Vec::with_capacity(self.cfg.layers);
        for i in 0..self.cfg.layers {
            let (next, a) = transformer_layer_forward_with_attention(&h, &self.layer_params(i))?;
            h = next;
            attn.push(a);
        }
        let y: f64 = h.row(0).iter().zip(&self.head_w).map(|(&a, &b)| a * b).sum::<f64>()
            + self.head_b;
        Ok((y, attn))
    }

    fn project(&self, channels: &Matrix) -> Matrix {
        let d = self.cfg.d;
        let n_tok = channels.rows();
        let mut x = Matrix::zeros(n_tok + 1, d);
        x.row_mut(0).copy_from_slice(&self.graph_emb);
        matmul_into(
            &mut x.data_mut()[d..],
            channels.data(),
            self.w_in.data(),
            n_tok,
            channels.cols(),
            d,
        );
        x
    }
}

fn channel_matrix(ts: &TokenSequence) -> Matrix {
    let width = ts.channel_width();
    let rows = ts.len() - ts.num_specials();
    let mut m = Matrix::zeros(rows, width);
    let mut r = 0;
    for tok in &ts.tokens {
        if tok.kind.is_special() {
            continue;
        }
        m.row_mut(r).copy_from_slice(&tok.channels);
        r += 1;
    }
    m
}

struct RegGrads {
    w_in: Matrix,
    graph_emb: Vec<f64>,
    e: Option<Matrix>,
    layers: Vec<(Vec<HeadGrads>, MlpGrads)>,
    head_w: Vec<f64>,
    head_b: f64,
}

impl RegGrads {
    fn zeros(cfg: &RegressionConfig) -> RegGrads {
        RegGrads {
            w_in: Matrix::zeros(cfg.token_width(), cfg.d),
            graph_emb: vec![0.0; cfg.d],
            e: cfg.with_identifiers.then(|| Matrix::zeros(2, cfg.d_e)),
            layers: (0..cfg.layers)
                .map(|_| {
                    (
                        (0..cfg.heads)
                            .map(|_| HeadGrads {
                                w_q: Matrix::zeros(cfg.d, cfg.d_h),
                                b_q: vec![0.0; cfg.d_h],
                                w_k: Matrix::zeros(cfg.d, cfg.d_h),
                                b_k: vec![0.0; cfg.d_h],
                                w_v: Matrix::zeros(cfg.d, cfg.d_h),
                                w_o: Matrix::zeros(cfg.d_h, cfg.d),
                            })
                            .collect(),
                        MlpGrads {
                            w1: Matrix::zeros(cfg.d, cfg.d_f),
                            b1: vec![0.0; cfg.d_f],
                            w2: Matrix::zeros(cfg.d_f, cfg.d),
                            b2: vec![0.0; cfg.d],
                        },
                    )
                })
                .collect(),
            head_w: vec![0.0; cfg.d],
            head_b: 0.0,
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.w_in.data(), &self.graph_emb];
        if let Some(e) = &self.e {
            v.push(e.data());
        }
        for (heads, mlp) in &self.layers {
            for h in heads {
                v.push(h.w_q.data());
                v.push(&h.b_q);
                v.push(h.w_k.data());
                v.push(&h.b_k);
                v.push(h.w_v.data());
                v.push(h.w_o.data());
            }
            v.push(mlp.w1.data());
            v.push(&mlp.b1);
            v.push(mlp.w2.data());
            v.push(&mlp.b2);
        }
        v.push(&self.head_w);
        v.push(std::slice::from_ref(&self.head_b));
        v
    }

    fn scale(&mut self, s: f64) {
        for x in self.w_in.data_mut() {
            *x *= s;
        }
        for x in self.graph_emb.iter_mut() {
            *x *= s;
        }
        if let Some(e) = &mut self.e {
            for x in e.data_mut() {
                *x *= s;
            }
        }
        for (heads, mlp) in &mut self.layers {
            for h in heads {
                for x in h.w_q.data_mut() {
                    *x *= s;
                }
                for x in h.b_q.iter_mut() {
                    *x *= s;
                }
                for x in h.w_k.data_mut() {
                    *x *= s;
                }
                for x in h.b_k.iter_mut() {
                    *x *= s;
                }
                for x in h.w_v.data_mut() {
                    *x *= s;
                }
                for x in h.w_o.data_mut() {
                    *x *= s;
                }
            }
            for x in mlp.w1.data_mut() {
                *x *= s;
            }
            for x in mlp.b1.iter_mut() {
                *x *= s;
            }
            for x in mlp.w2.data_mut() {
                *x *= s;
            }
            for x in mlp.b2.iter_mut() {
                *x *= s;
            }
        }
        for x in self.head_w.iter_mut() {
            *x *= s;
        }
        self.head_b *= s;
    }
}

/// One training example's backward pass: squared-error loss on the graph
/// token readout, through both transformer layers and the projection.
fn backward_example(
    model: &RegressionModel,
    g: &Graph,
    id_seed: RngSeed,
    target: f64,
    grads: &mut RegGrads,
) -> Result<f64, ExperimentError> {
    let cfg = &model.cfg;
    let ts = model.tokenize(g, id_seed)?;
    let channels = channel_matrix(&ts);
    let x = model.project(&channels);
    // Forward, keeping inputs of each layer.
    let mut inputs = vec![x];
    for i in 0..cfg.layers {
        let next = crate::attention::transformer_layer_forward(
            inputs.last().unwrap(),
            &model.layer_params(i),
        )?;
        inputs.push(next);
    }
    let h_final = inputs.last().unwrap();
    let y: f64 = h_final.row(0).iter().zip(&model.head_w).map(|(&a, &b)| a * b).sum::<f64>()
        + model.head_b;
    let diff = y - target;
    let loss = diff * diff;
    // d loss / dy = 2 diff.
    let dy = 2.0 * diff;
    for (gw, &hv) in grads.head_w.iter_mut().zip(h_final.row(0)) {
        *gw += dy * hv;
    }
    grads.head_b += dy;
    let mut dh = Matrix::zeros(h_final.rows(), cfg.d);
    for (slot, &w) in dh.row_mut(0).iter_mut().zip(&model.head_w) {
        *slot = dy * w;
    }
    for i in (0..cfg.layers).rev() {
        let lg = transformer_layer_backward(&inputs[i], &model.layer_params(i), &dh)?;
        let (head_acc, mlp_acc) = &mut grads.layers[i];
        for (acc, g) in head_acc.iter_mut().zip(&lg.heads) {
            acc.w_q.add_assign(&g.w_q)?;
            acc.w_k.add_assign(&g.w_k)?;
            acc.w_v.add_assign(&g.w_v)?;
            acc.w_o.add_assign(&g.w_o)?;
            for (a, &b) in acc.b_q.iter_mut().zip(&g.b_q) {
                *a += b;
            }
            for (a, &b) in acc.b_k.iter_mut().zip(&g.b_k) {
                *a += b;
            }
        }
        mlp_acc.w1.add_assign(&lg.mlp.w1)?;
        mlp_acc.w2.add_assign(&lg.mlp.w2)?;
        for (a, &b) in mlp_acc.b1.iter_mut().zip(&lg.mlp.b1) {
            *a += b;
        }
        for (a, &b) in mlp_acc.b2.iter_mut().zip(&lg.mlp.b2) {
            *a += b;
        }
        dh = lg.x;
    }
    // Projection backward.
    for (a, &b) in grads.graph_emb.iter_mut().zip(dh.row(0)) {
        *a += b;
    }
    let n_tok = channels.rows();
    let dx_tokens = &dh.data()[cfg.d..];
    let mut d_w_in = Matrix::zeros(cfg.token_width(), cfg.d);
    matmul_tn_into(
        d_w_in.data_mut(),
        channels.data(),
        dx_tokens,
        cfg.token_width(),
        n_tok,
        cfg.d,
    );
    grads.w_in.add_assign(&d_w_in)?;
    if model.type_ids.is_some() {
        let type_start = 2 * cfg.d_p;
        let mut w_in_type = Matrix::zeros(cfg.d_e, cfg.d);
        for r in 0..cfg.d_e {
            w_in_type.row_mut(r).copy_from_slice(model.w_in.row(type_start + r));
        }
        let mut d_type = Matrix::zeros(n_tok, cfg.d_e);
        matmul_nt_into(
            d_type.data_mut(),
            dx_tokens,
            w_in_type.data(),
            n_tok,
            cfg.d,
            cfg.d_e,
        );
        let de = grads.e.as_mut().expect("with_identifiers has type ids");
        let mut t_idx = 0;
        for tok in &ts.tokens {
            if tok.kind.is_special() {
                continue;
            }
            let row = if tok.kind == TokenKind::Node { 0 } else { 1 };
            for (a, &b) in de.row_mut(row).iter_mut().zip(d_type.row(t_idx)) {
                *a += b;
            }
            t_idx += 1;
        }
    }
    Ok(loss)
}

fn lr_scale(step: usize, steps: usize, warmup: usize) -> f64 {
    let s = step as f64 + 1.0;
    if (step as f64) < warmup as f64 {
        s / warmup.max(1) as f64
    } else {
        ((steps as f64 - s) / (steps as f64 - warmup as f64).max(1.0)).max(0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionRun {
    pub test_mse: f64,
    pub train_mse: f64,
    pub history: Vec<(usize, f64)>,
}

/// Train one regression model; targets are standardized triangle counts.
pub fn train_regression(
    cfg: &RegressionConfig,
) -> Result<(RegressionModel, RegressionRun), ExperimentError> {
    let root = RngSeed(cfg.seed);
    let (train, test) = ba_dataset(cfg.train_graphs, cfg.test_graphs, root.child(0))?;
    let targets = StandardizedTargets::fit(&train);
    let mut model = RegressionModel::init(cfg, root.child(1));
    let adamw = AdamWConfig {
        lr: cfg.peak_lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let sizes: Vec<usize> = model.param_slices_mut().iter().map(|s| s.len()).collect();
    let mut states: Vec<AdamWState> = sizes.iter().map(|&n| AdamWState::new(n, adamw)).collect();

    let steps_per_epoch = cfg.train_graphs.div_ceil(cfg.batch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let epoch = step / steps_per_epoch;
        let slot = step % steps_per_epoch;
        if slot == 0 {
            let mut rng = root.child(2000 + epoch as u64).rng();
            for i in (1..order.len()).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=i);
                order.swap(i, j);
            }
        }
        let start = slot * cfg.batch;
        let end = (start + cfg.batch).min(order.len());
        let batch = &order[start..end];
        let mut grads = RegGrads::zeros(cfg);
        let mut batch_loss = 0.0;
        for &gi in batch {
            let id_seed = root.child(3000).child(epoch as u64).child(gi as u64);
            let loss =
                backward_example(&model, &train[gi], id_seed, targets.target(&train[gi]), &mut grads)?;
            if !loss.is_finite() {
                return Err(ExperimentError::Diverged { step });
            }
            batch_loss += loss;
        }
        let inv = 1.0 / batch.len() as f64;
        batch_loss *= inv;
        grads.scale(inv);
        let scale = lr_scale(step, cfg.steps, cfg.warmup);
        let grad_slices = grads.slices();
        for ((param, grad), state) in model
            .param_slices_mut()
            .into_iter()
            .zip(grad_slices)
            .zip(states.iter_mut())
        {
            state.step(param, grad, scale)?;
        }
        history.push((step, batch_loss));
    }
    let eval = |graphs: &[Graph], tag: u64| -> Result<f64, ExperimentError> {
        let mut total = 0.0;
        for (gi, g) in graphs.iter().enumerate() {
            let id_seed = root.child(9000 + tag).child(gi as u64);
            let (y, _) = model.forward(g, id_seed)?;
            let t = targets.target(g);
            total += (y - t) * (y - t);
        }
        Ok(total / graphs.len().max(1) as f64)
    };
    let run = RegressionRun {
        test_mse: eval(&test, 0)?,
        train_mse: eval(&train, 1)?,
        history,
    };
    Ok((model, run))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionOutcome {
    pub mse_with_ids: f64,
    pub mse_without_ids: f64,
    pub conditional_variance_bound: f64,
}

/// Paired ablation: identical data and schedule, with and without
/// identifiers, plus the exact conditional-variance lower bound on what any
/// token-count-only predictor could reach on the test set.
pub fn train_regression_demo(
    base: &RegressionConfig,
) -> Result<RegressionOutcome, ExperimentError> {
    let mut with = base.clone();
    with.with_identifiers = true;
    let mut without = base.clone();
    without.with_identifiers = false;
    let (_, run_with) = train_regression(&with)?;
    let (_, run_without) = train_regression(&without)?;
    let (train, test) = ba_dataset(base.train_graphs, base.test_graphs, RngSeed(base.seed).child(0))?;
    let targets = StandardizedTargets::fit(&train);
    Ok(RegressionOutcome {
        mse_with_ids: run_with.test_mse,
        mse_without_ids: run_without.test_mse,
        conditional_variance_bound: conditional_variance_bound(&test, &targets),
    })
}

/// Mean attention distance (in hops) per layer and head, aggregated over a
/// graph collection. Graphs without any finite token pair are skipped.
pub fn attention_distance_report(
    model: &RegressionModel,
    graphs: &[Graph],
    eval_seed: RngSeed,
) -> Result<Vec<(usize, usize, f64)>, ExperimentError> {
    let layers = model.cfg.layers;
    let heads = model.cfg.heads;
    let mut totals = vec![0.0; layers * heads];
    let mut counted = 0.0;
    for (gi, g) in graphs.iter().enumerate() {
        if g.n() < 2 {
            continue;
        }
        let ts = model.tokenize(g, eval_seed.child(gi as u64))?;
        let (_, attn) = {
            let channels = channel_matrix(&ts);
            let x = model.project(&channels);
            let mut h = x;
            let mut all = Vec::new();
            for i in 0..layers {
                let (next, a) =
                    transformer_layer_forward_with_attention(&h, &model.layer_params(i))?;
                h = next;
                all.push(a);
            }
            (h, all)
        };
        let hops = hop_distances(g);
        let mut ok = true;
        let mut graph_vals = vec![0.0; layers * heads];
        for (li, layer_attn) in attn.iter().enumerate() {
            match crate::attention::attention_distance(layer_attn, &ts, &hops) {
                Ok(d) => {
                    for (hi, v) in d.iter().enumerate() {
                        graph_vals[li * heads + hi] = *v;
                    }
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            for (t, v) in totals.iter_mut().zip(&graph_vals) {
                *t += v;
            }
            counted += 1.0;
        }
    }
    if counted == 0.0 {
        return Err(ExperimentError::Config(
            "no graph produced finite attention distances".into(),
        ));
    }
    let mut rows = Vec::with_capacity(layers * heads);
    for li in 0..layers {
        for hi in 0..heads {
            rows.push((li, hi, totals[li * heads + hi] / counted));
        }
    }
    Ok(rows)
}
