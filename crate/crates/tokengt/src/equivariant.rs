//! Equivalence classes of multi-indices, their binary basis tensors, and the
//! maximally expressive permutation-equivariant linear layers built from
//! them, together with the stacked invariant-network reference model.
//!
//! An order-`l` equivalence class is the set of multi-indices in `[n]^l`
//! sharing one equality pattern; classes are in bijection with set partitions
//! of the `l` positions and are represented canonically as restricted-growth
//! strings. The canonical ordering everywhere in this crate is the
//! lexicographic order of those strings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::DenseTensor;
use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum EquivariantError {
    #[error("order {order} outside supported range 0..=8")]
    OrderOutOfRange { order: usize },
    #[error("invalid restricted-growth string {0:?}")]
    InvalidPartition(Vec<u8>),
    #[error("dense materialization guard exceeded: {entries} entries > {limit}")]
    MaterializationGuard { entries: usize, limit: usize },
    #[error("expected {expected} {what}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub const MAX_ORDER: usize = 8;
const MATERIALIZE_LIMIT: usize = 1_000_000;

/// Number of set partitions of `l` elements.
pub fn bell_number(l: usize) -> Result<usize, EquivariantError> {
    if l > MAX_ORDER {
        return Err(EquivariantError::OrderOutOfRange { order: l });
    }
    // Bell triangle.
    let mut prev = vec![1usize];
    for _ in 0..l {
        let mut next = Vec::with_capacity(prev.len() + 1);
        next.push(*prev.last().unwrap());
        for &p in &prev {
            next.push(next.last().unwrap() + p);
        }
        prev = next;
    }
    Ok(prev[0])
}

/// A set partition of multi-index positions, stored as a restricted-growth
/// string: entry `i` is the block id of position `i`, blocks numbered by
/// first appearance. Ordering is lexicographic on the string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EquivalenceClass {
    partition: Vec<u8>,
}

impl EquivalenceClass {
    pub fn new(partition: Vec<u8>) -> Result<EquivalenceClass, EquivariantError> {
        if partition.len() > MAX_ORDER {
            return Err(EquivariantError::OrderOutOfRange {
                order: partition.len(),
            });
        }
        let mut max_seen: i32 = -1;
        for &p in &partition {
            if i32::from(p) > max_seen + 1 {
                return Err(EquivariantError::InvalidPartition(partition));
            }
            max_seen = max_seen.max(i32::from(p));
        }
        Ok(EquivalenceClass { partition })
    }

    /// The empty partition: the single order-0 class.
    pub fn empty() -> EquivalenceClass {
        EquivalenceClass { partition: Vec::new() }
    }

    /// Equality pattern of a multi-index.
    pub fn of(multi_index: &[usize]) -> EquivalenceClass {
        let mut blocks: Vec<usize> = Vec::new();
        let mut partition = Vec::with_capacity(multi_index.len());
        for &i in multi_index {
            let id = blocks.iter().position(|&b| b == i).unwrap_or_else(|| {
                blocks.push(i);
                blocks.len() - 1
            });
            partition.push(id as u8);
        }
        EquivalenceClass { partition }
    }

    pub fn order(&self) -> usize {
        self.partition.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.partition.iter().map(|&p| p as usize + 1).max().unwrap_or(0)
    }

    pub fn partition(&self) -> &[u8] {
        &self.partition
    }

    pub fn contains(&self, multi_index: &[usize]) -> bool {
        multi_index.len() == self.order() && EquivalenceClass::of(multi_index) == *self
    }

    /// The class of the first `l` positions, renumbered canonically.
    pub fn prefix(&self, l: usize) -> EquivalenceClass {
        canonicalize(&self.partition[..l])
    }

    /// The class of the positions from `l` on, renumbered canonically.
    pub fn suffix(&self, l: usize) -> EquivalenceClass {
        canonicalize(&self.partition[l..])
    }

    /// Compact text form, e.g. "0010"; "-" for the empty partition.
    pub fn key(&self) -> String {
        if self.partition.is_empty() {
            "-".into()
        } else {
            self.partition.iter().map(|p| char::from(b'0' + p)).collect()
        }
    }

    pub fn from_key(key: &str) -> Result<EquivalenceClass, EquivariantError> {
        if key == "-" {
            return Ok(EquivalenceClass::empty());
        }
        let partition: Vec<u8> = key
            .chars()
            .map(|c| {
                c.to_digit(10)
                    .map(|d| d as u8)
                    .ok_or_else(|| EquivariantError::InvalidPartition(Vec::new()))
            })
            .collect::<Result<_, _>>()?;
        EquivalenceClass::new(partition)
    }
}

fn canonicalize(pattern: &[u8]) -> EquivalenceClass {
    let mut map: Vec<u8> = Vec::new();
    let mut partition = Vec::with_capacity(pattern.len());
    for &p in pattern {
        let id = map.iter().position(|&b| b == p).unwrap_or_else(|| {
            map.push(p);
            map.len() - 1
        });
        partition.push(id as u8);
    }
    EquivalenceClass { partition }
}

/// All order-`l` classes in lexicographic restricted-growth-string order.
/// `enumerate_classes(0)` yields the single empty class.
pub fn enumerate_classes(l: usize) -> Result<Vec<EquivalenceClass>, EquivariantError> {
    if l > MAX_ORDER {
        return Err(EquivariantError::OrderOutOfRange { order: l });
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(l);
    fn recurse(l: usize, max_block: i32, current: &mut Vec<u8>, out: &mut Vec<EquivalenceClass>) {
        if current.len() == l {
            out.push(EquivalenceClass {
                partition: current.clone(),
            });
            return;
        }
        for b in 0..=(max_block + 1) {
            current.push(b as u8);
            recurse(l, max_block.max(b), current, out);
            current.pop();
        }
    }
    recurse(l, -1, &mut current, &mut out);
    Ok(out)
}

/// Position of a class in the canonical enumeration of its order.
pub fn class_index(class: &EquivalenceClass) -> usize {
    enumerate_classes(class.order())
        .expect("order within range")
        .iter()
        .position(|c| c == class)
        .expect("canonical enumeration is exhaustive")
}

/// Binary indicator tensor of an equivalence class: entry at `i` is 1 iff
/// `i` has the class's equality pattern. Materialization is guarded; the
/// membership test works at any size.
#[derive(Debug, Clone)]
pub struct BasisTensor {
    class: EquivalenceClass,
    n: usize,
    dense: Option<Vec<f64>>,
}

impl BasisTensor {
    pub fn new(class: EquivalenceClass, n: usize) -> BasisTensor {
        let entries = n.checked_pow(class.order() as u32);
        let dense = match entries {
            Some(e) if e <= MATERIALIZE_LIMIT => {
                let mut data = vec![0.0; e];
                let order = class.order();
                let mut idx = vec![0usize; order];
                for (flat, slot) in data.iter_mut().enumerate() {
                    let mut rem = flat;
                    for s in idx.iter_mut().rev() {
                        *s = rem % n;
                        rem /= n;
                    }
                    if class.contains(&idx) {
                        *slot = 1.0;
                    }
                }
                Some(data)
            }
            _ => None,
        };
        BasisTensor { class, n, dense }
    }

    pub fn class(&self) -> &EquivalenceClass {
        &self.class
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn contains(&self, multi_index: &[usize]) -> bool {
        self.class.contains(multi_index)
    }

    pub fn dense(&self) -> Result<&[f64], EquivariantError> {
        self.dense.as_deref().ok_or(EquivariantError::MaterializationGuard {
            entries: self.n.pow(self.class.order() as u32),
            limit: MATERIALIZE_LIMIT,
        })
    }
}

/// Parameters of an equivariant linear map from order-`k` to order-`l`
/// tensors: one `d_in x d_out` weight per order-(l+k) class and one `d_out`
/// bias per order-`l` class, both in canonical class order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivariantLayerParams {
    pub k: usize,
    pub l: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl EquivariantLayerParams {
    pub fn zeros(k: usize, l: usize, d_in: usize, d_out: usize) -> Result<Self, EquivariantError> {
        let nw = bell_number(l + k)?;
        let nb = bell_number(l)?;
        Ok(EquivariantLayerParams {
            k,
            l,
            d_in,
            d_out,
            weights: vec![Matrix::zeros(d_in, d_out); nw],
            biases: vec![vec![0.0; d_out]; nb],
        })
    }

    pub fn validate(&self) -> Result<(), EquivariantError> {
        let nw = bell_number(self.l + self.k)?;
        if self.weights.len() != nw {
            return Err(EquivariantError::CountMismatch {
                what: "weights",
                expected: nw,
                got: self.weights.len(),
            });
        }
        let nb = bell_number(self.l)?;
        if self.biases.len() != nb {
            return Err(EquivariantError::CountMismatch {
                what: "biases",
                expected: nb,
                got: self.biases.len(),
            });
        }
        for w in &self.weights {
            if w.shape() != (self.d_in, self.d_out) {
                return Err(EquivariantError::Shape(format!(
                    "weight shape {:?}, expected ({}, {})",
                    w.shape(),
                    self.d_in,
                    self.d_out
                )));
            }
        }
        for b in &self.biases {
            if b.len() != self.d_out {
                return Err(EquivariantError::Shape(format!(
                    "bias length {}, expected {}",
                    b.len(),
                    self.d_out
                )));
            }
        }
        Ok(())
    }

    pub fn random(
        k: usize,
        l: usize,
        d_in: usize,
        d_out: usize,
        seed: crate::numerics::RngSeed,
    ) -> Result<Self, EquivariantError> {
        let mut p = Self::zeros(k, l, d_in, d_out)?;
        for (i, w) in p.weights.iter_mut().enumerate() {
            *w = crate::numerics::gaussian_matrix(d_in, d_out, seed.child(i as u64))
                .map_err(|e| EquivariantError::Shape(e.to_string()))?;
        }
        let mut rng = seed.child(1000).rng();
        for b in p.biases.iter_mut() {
            for v in b.iter_mut() {
                *v = rand::Rng::gen_range(&mut rng, -1.0..1.0);
            }
        }
        Ok(p)
    }
}

/// Apply the equivariant linear layer: for every output multi-index `i`, sum
/// input entries grouped by the joint class of `(i, j)` through that class's
/// weight, then add the bias of `i`'s own class.
pub fn equivariant_linear_apply(
    p: &EquivariantLayerParams,
    x: &DenseTensor,
) -> Result<DenseTensor, EquivariantError> {
    p.validate()?;
    if x.order() != p.k || x.channels() != p.d_in {
        return Err(EquivariantError::Shape(format!(
            "input order {} channels {}, layer expects order {} channels {}",
            x.order(),
            x.channels(),
            p.k,
            p.d_in
        )));
    }
    let n = x.n();
    let joint_classes = enumerate_classes(p.l + p.k)?;
    let class_lookup: std::collections::HashMap<&EquivalenceClass, usize> =
        joint_classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let out_classes = enumerate_classes(p.l)?;
    let out_lookup: std::collections::HashMap<&EquivalenceClass, usize> =
        out_classes.iter().enumerate().map(|(i, c)| (c, i)).collect();

    let mut out = DenseTensor::zeros(p.l, n, p.d_out);
    let out_entries = out.num_entries();
    let mut i_idx = vec![0usize; p.l];
    let mut j_idx = vec![0usize; p.k];
    let mut joint = vec![0usize; p.l + p.k];
    for flat_i in 0..out_entries {
        let mut rem = flat_i;
        for s in i_idx.iter_mut().rev() {
            *s = rem % n;
            rem /= n;
        }
        // Accumulate per joint class before the weight multiply: one
        // d_in-vector per class, then a single matvec per class.
        let mut sums = vec![vec![0.0f64; p.d_in]; joint_classes.len()];
        for flat_j in 0..x.num_entries() {
            let mut rem = flat_j;
            for s in j_idx.iter_mut().rev() {
                *s = rem % n;
                rem /= n;
            }
            joint[..p.l].copy_from_slice(&i_idx);
            joint[p.l..].copy_from_slice(&j_idx);
            let c = EquivalenceClass::of(&joint);
            let ci = class_lookup[&c];
            let xj = x.entry(&j_idx);
            for (s, &v) in sums[ci].iter_mut().zip(xj) {
                *s += v;
            }
        }
        let orow = out.entry_mut(&i_idx);
        for (ci, sum) in sums.iter().enumerate() {
            if sum.iter().all(|&v| v == 0.0) {
                continue;
            }
            let w = &p.weights[ci];
            for a in 0..p.d_in {
                let s = sum[a];
                if s == 0.0 {
                    continue;
                }
                for (o, &wv) in orow.iter_mut().zip(w.row(a)) {
                    *o += s * wv;
                }
            }
        }
        let bias_ci = out_lookup[&EquivalenceClass::of(&i_idx)];
        for (o, &b) in orow.iter_mut().zip(&p.biases[bias_ci]) {
            *o += b;
        }
    }
    Ok(out)
}

/// Invariant linear layer: the `l = 0` case, producing a single vector.
pub fn invariant_apply(
    p: &EquivariantLayerParams,
    x: &DenseTensor,
) -> Result<Vec<f64>, EquivariantError> {
    if p.l != 0 {
        return Err(EquivariantError::Shape(format!(
            "invariant layer requires l = 0, got l = {}",
            p.l
        )));
    }
    let out = equivariant_linear_apply(p, x)?;
    Ok(out.data().to_vec())
}

/// Elementwise nonlinearity used between stacked layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// Plain feedforward network: affine layers with the activation between them
/// (none after the last).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub activation: Activation,
}

impl Mlp {
    pub fn identity(width: usize) -> Mlp {
        Mlp {
            layers: vec![(Matrix::identity(width), vec![0.0; width])],
            activation: Activation::Identity,
        }
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let mut next = b.clone();
            for (i, &hv) in h.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                for (nv, &wv) in next.iter_mut().zip(w.row(i)) {
                    *nv += hv * wv;
                }
            }
            if li + 1 < self.layers.len() {
                for v in next.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            h = next;
        }
        h
    }
}

/// A stack of order-preserving equivariant layers with activations, an
/// invariant pooling head, and an output network. The reference model that
/// the token-based transformer construction is verified against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IGNSpec {
    pub k: usize,
    pub layers: Vec<EquivariantLayerParams>,
    pub activation: Activation,
    pub head: EquivariantLayerParams,
    pub output_mlp: Mlp,
}

impl IGNSpec {
    pub fn validate(&self) -> Result<(), EquivariantError> {
        let mut width = None;
        for layer in &self.layers {
            layer.validate()?;
            if layer.k != self.k || layer.l != self.k {
                return Err(EquivariantError::Shape(format!(
                    "stack layer must map order {0} to order {0}",
                    self.k
                )));
            }
            if let Some(w) = width {
                if layer.d_in != w {
                    return Err(EquivariantError::Shape(
                        "adjacent layer widths do not chain".into(),
                    ));
                }
            }
            width = Some(layer.d_out);
        }
        self.head.validate()?;
        if self.head.k != self.k || self.head.l != 0 {
            return Err(EquivariantError::Shape("head must map to order 0".into()));
        }
        if let Some(w) = width {
            if self.head.d_in != w {
                return Err(EquivariantError::Shape(
                    "head input width does not match stack output".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn random(
        k: usize,
        widths: &[usize],
        d_in: usize,
        d_out: usize,
        seed: crate::numerics::RngSeed,
    ) -> Result<IGNSpec, EquivariantError> {
        let mut layers = Vec::new();
        let mut prev = d_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(EquivariantLayerParams::random(
                k,
                k,
                prev,
                w,
                seed.child(i as u64),
            )?);
            prev = w;
        }
        let head = EquivariantLayerParams::random(k, 0, prev, d_out, seed.child(900))?;
        let spec = IGNSpec {
            k,
            layers,
            activation: Activation::Relu,
            head,
            output_mlp: Mlp::identity(d_out),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Full forward pass: stacked equivariant layers with activations in
/// between, invariant pooling head, then the output network.
pub fn ign_forward(spec: &IGNSpec, x: &DenseTensor) -> Result<Vec<f64>, EquivariantError> {
    spec.validate()?;
    let mut h = x.clone();
    let t = spec.layers.len();
    for (i, layer) in spec.layers.iter().enumerate() {
        h = equivariant_linear_apply(layer, &h)?;
        if i + 1 < t {
            for v in h.data_mut() {
                *v = spec.activation.apply(*v);
            }
        }
    }
    let pooled = invariant_apply(&spec.head, &h)?;
    Ok(spec.output_mlp.apply(&pooled))
}

// ---------------------------------------------------------------------------
// Serialization: orders and widths plus per-class weights keyed by
// restricted-growth string.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    k: usize,
    l: usize,
    d_in: usize,
    d_out: usize,
    weights: Vec<(String, Vec<Vec<f64>>)>,
    biases: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct IgnDoc {
    k: usize,
    activation: Activation,
    layers: Vec<LayerDoc>,
    head: LayerDoc,
    output_mlp: Mlp,
}

fn layer_to_doc(p: &EquivariantLayerParams) -> Result<LayerDoc, EquivariantError> {
    let wc = enumerate_classes(p.l + p.k)?;
    let bc = enumerate_classes(p.l)?;
    Ok(LayerDoc {
        k: p.k,
        l: p.l,
        d_in: p.d_in,
        d_out: p.d_out,
        weights: wc
            .iter()
            .zip(&p.weights)
            .map(|(c, w)| {
                let rows = (0..w.rows()).map(|i| w.row(i).to_vec()).collect();
                (c.key(), rows)
            })
            .collect(),
        biases: bc.iter().zip(&p.biases).map(|(c, b)| (c.key(), b.clone())).collect(),
    })
}

fn layer_from_doc(doc: &LayerDoc) -> Result<EquivariantLayerParams, EquivariantError> {
    let wc = enumerate_classes(doc.l + doc.k)?;
    let mut weights = vec![Matrix::zeros(doc.d_in, doc.d_out); wc.len()];
    for (key, rows) in &doc.weights {
        let class = EquivalenceClass::from_key(key)?;
        let idx = class_index(&class);
        weights[idx] = Matrix::from_rows(rows).map_err(|e| EquivariantError::Shape(e.to_string()))?;
    }
    let bc = enumerate_classes(doc.l)?;
    let mut biases = vec![vec![0.0; doc.d_out]; bc.len()];
    for (key, b) in &doc.biases {
        let class = EquivalenceClass::from_key(key)?;
        biases[class_index(&class)] = b.clone();
    }
    let p = EquivariantLayerParams {
        k: doc.k,
        l: doc.l,
        d_in: doc.d_in,
        d_out: doc.d_out,
        weights,
        biases,
    };
    p.validate()?;
    Ok(p)
}

pub fn ign_spec_to_json(spec: &IGNSpec) -> Result<String, EquivariantError> {
    let doc = IgnDoc {
        k: spec.k,
        activation: spec.activation,
        layers: spec
            .layers
            .iter()
            .map(layer_to_doc)
            .collect::<Result<_, _>>()?,
        head: layer_to_doc(&spec.head)?,
        output_mlp: spec.output_mlp.clone(),
    };
    Ok(serde_json::to_string_pretty(&doc).expect("serializable"))
}

pub fn ign_spec_from_json(text: &str) -> Result<IGNSpec, EquivariantError> {
    let doc: IgnDoc =
        serde_json::from_str(text).map_err(|e| EquivariantError::Shape(e.to_string()))?;
    let spec = IGNSpec {
        k: doc.k,
        activation: doc.activation,
        layers: doc.layers.iter().map(layer_from_doc).collect::<Result<_, _>>()?,
        head: layer_from_doc(&doc.head)?,
        output_mlp: doc.output_mlp,
    };
    spec.validate()?;
    Ok(spec)
}
