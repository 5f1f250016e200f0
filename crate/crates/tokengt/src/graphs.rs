//! Graph representation, random-graph generation, Laplacians, hop distances,
//! and node-permutation actions on graphs and dense tensors.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::numerics::{Matrix, NumericsError, RngSeed};

/// Marker for an unreachable node pair in [`hop_distances`].
pub const UNREACHABLE: f64 = f64::INFINITY;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node index {index} out of range for {n} nodes")]
    NodeOutOfRange { index: usize, n: usize },
    #[error("duplicate edge ({u}, {v})")]
    DuplicateEdge { u: usize, v: usize },
    #[error("feature rows {got} do not match count {expected}")]
    FeatureRows { expected: usize, got: usize },
    #[error("attachment count k={k} must satisfy 2 <= k < n={n}")]
    BadAttachment { k: usize, n: usize },
    #[error("permutation is not a bijection on [{n}]")]
    NotAPermutation { n: usize },
    #[error("tensor order/size mismatch: expected {expected}, got {got}")]
    TensorMismatch { expected: usize, got: usize },
    #[error("malformed graph record at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Sparse undirected graph. Edges are stored once, canonically ordered with
/// `u <= v`. Node and edge features are optional and, when both are present,
/// share the same channel width.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    node_features: Option<Matrix>,
    edge_features: Option<Matrix>,
}

impl Graph {
    pub fn new(
        n: usize,
        edges: Vec<(usize, usize)>,
        node_features: Option<Matrix>,
        edge_features: Option<Matrix>,
    ) -> Result<Graph, GraphError> {
        let mut canonical = Vec::with_capacity(edges.len());
        let mut seen = std::collections::HashSet::new();
        for (u, v) in edges {
            if u >= n {
                return Err(GraphError::NodeOutOfRange { index: u, n });
            }
            if v >= n {
                return Err(GraphError::NodeOutOfRange { index: v, n });
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(GraphError::DuplicateEdge { u: e.0, v: e.1 });
            }
            canonical.push(e);
        }
        if let Some(f) = &node_features {
            if f.rows() != n {
                return Err(GraphError::FeatureRows {
                    expected: n,
                    got: f.rows(),
                });
            }
        }
        if let Some(f) = &edge_features {
            if f.rows() != canonical.len() {
                return Err(GraphError::FeatureRows {
                    expected: canonical.len(),
                    got: f.rows(),
                });
            }
        }
        Ok(Graph {
            n,
            edges: canonical,
            node_features,
            edge_features,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> Option<&Matrix> {
        self.node_features.as_ref()
    }

    pub fn edge_features(&self) -> Option<&Matrix> {
        self.edge_features.as_ref()
    }

    /// Feature channel width shared by node and edge tokens (0 when the graph
    /// carries no features).
    pub fn feature_width(&self) -> usize {
        self.node_features
            .as_ref()
            .map(|f| f.cols())
            .or_else(|| self.edge_features.as_ref().map(|f| f.cols()))
            .unwrap_or(0)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            if u != v {
                deg[v] += 1;
            }
        }
        deg
    }

    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.n, self.n);
        for &(u, v) in &self.edges {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        a
    }

    /// Exact triangle count by brute force over all node triples.
    pub fn triangle_count(&self) -> usize {
        let a = self.adjacency();
        let mut count = 0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if a.get(i, j) == 0.0 {
                    continue;
                }
                for k in (j + 1)..self.n {
                    if a.get(i, k) != 0.0 && a.get(j, k) != 0.0 {
                        count += 1;
                    }
                }
            }
        }
        count
    }
}

/// Dense order-`k` tensor over `[n]^k` with `channels` feature channels per
/// entry, stored row-major in multi-index then channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    order: usize,
    n: usize,
    channels: usize,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(order: usize, n: usize, channels: usize) -> DenseTensor {
        let entries = n.pow(order as u32);
        DenseTensor {
            order,
            n,
            channels,
            data: vec![0.0; entries * channels],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_entries(&self) -> usize {
        self.n.pow(self.order as u32)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order);
        let mut flat = 0;
        for &i in idx {
            debug_assert!(i < self.n);
            flat = flat * self.n + i;
        }
        flat
    }

    /// Decode a flat entry index back into its multi-index.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.order];
        for slot in idx.iter_mut().rev() {
            *slot = flat % self.n;
            flat /= self.n;
        }
        idx
    }

    pub fn entry(&self, idx: &[usize]) -> &[f64] {
        let f = self.flat_index(idx);
        &self.data[f * self.channels..(f + 1) * self.channels]
    }

    pub fn entry_mut(&mut self, idx: &[usize]) -> &mut [f64] {
        let f = self.flat_index(idx);
        &mut self.data[f * self.channels..(f + 1) * self.channels]
    }

    pub fn get(&self, idx: &[usize], channel: usize) -> f64 {
        self.entry(idx)[channel]
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Barabási–Albert preferential attachment: `k` initially unconnected seed
/// nodes, then each new node links to `k` distinct previous nodes drawn with
/// probability proportional to degree + 1, without replacement.
pub fn barabasi_albert(n: usize, k: usize, seed: RngSeed) -> Result<Graph, GraphError> {
    if k < 2 || k >= n {
        return Err(GraphError::BadAttachment { k, n });
    }
    let mut rng = seed.rng();
    let mut degree = vec![0usize; n];
    let mut edges = Vec::with_capacity((n - k) * k);
    for new in k..n {
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..k {
            let total: usize = (0..new)
                .filter(|c| !chosen.contains(c))
                .map(|c| degree[c] + 1)
                .sum();
            let mut ticket = rng.gen_range(0..total);
            let mut pick = usize::MAX;
            for c in 0..new {
                if chosen.contains(&c) {
                    continue;
                }
                let w = degree[c] + 1;
                if ticket < w {
                    pick = c;
                    break;
                }
                ticket -= w;
            }
            chosen.push(pick);
        }
        for &c in &chosen {
            degree[c] += 1;
            degree[new] += 1;
            edges.push((c.min(new), c.max(new)));
        }
    }
    Graph::new(n, edges, None, None)
}

/// Symmetric normalized Laplacian `I - D^{-1/2} A D^{-1/2}`, with the
/// convention `0^{-1/2} := 0` for isolated nodes.
pub fn normalized_laplacian(g: &Graph) -> Matrix {
    let n = g.n();
    let a = g.adjacency();
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let dinv: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let norm = dinv[i] * a.get(i, j) * dinv[j];
            let v = if i == j { 1.0 - norm } else { -norm };
            l.set(i, j, v);
        }
    }
    l
}

/// All-pairs BFS hop distances. Unreachable pairs are [`UNREACHABLE`].
pub fn hop_distances(g: &Graph) -> Matrix {
    let n = g.n();
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in g.edges() {
        if u != v {
            adj[u].push(v);
            adj[v].push(u);
        }
    }
    let mut dist = Matrix::zeros(n, n);
    for start in 0..n {
        let mut d = vec![UNREACHABLE; n];
        d[start] = 0.0;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if d[v] == UNREACHABLE {
                    d[v] = d[u] + 1.0;
                    queue.push_back(v);
                }
            }
        }
        for (j, &val) in d.iter().enumerate() {
            dist.set(start, j, val);
        }
    }
    dist
}

fn check_permutation(pi: &[usize], n: usize) -> Result<(), GraphError> {
    if pi.len() != n {
        return Err(GraphError::NotAPermutation { n });
    }
    let mut seen = vec![false; n];
    for &p in pi {
        if p >= n || seen[p] {
            return Err(GraphError::NotAPermutation { n });
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn invert_permutation(pi: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; pi.len()];
    for (i, &p) in pi.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Relabel nodes: node `v` becomes `pi[v]`. Feature rows follow their nodes,
/// edge features follow their edges.
pub fn permute_graph(g: &Graph, pi: &[usize]) -> Result<Graph, GraphError> {
    check_permutation(pi, g.n())?;
    let node_features = g.node_features().map(|f| {
        let mut out = Matrix::zeros(f.rows(), f.cols());
        for v in 0..g.n() {
            out.row_mut(pi[v]).copy_from_slice(f.row(v));
        }
        out
    });
    let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(u, v)| (pi[u], pi[v])).collect();
    Graph::new(g.n(), edges, node_features, g.edge_features().cloned())
}

/// Permutation action on dense tensors: the output entry at multi-index `i`
/// equals the input entry at `pi^{-1}(i)`.
pub fn permute_tensor(x: &DenseTensor, pi: &[usize]) -> Result<DenseTensor, GraphError> {
    check_permutation(pi, x.n())?;
    let inv = invert_permutation(pi);
    let mut out = DenseTensor::zeros(x.order(), x.n(), x.channels());
    let mut idx = vec![0usize; x.order()];
    let mut src = vec![0usize; x.order()];
    for flat in 0..x.num_entries() {
        let mut rem = flat;
        for slot in idx.iter_mut().rev() {
            *slot = rem % x.n();
            rem /= x.n();
        }
        for (s, &i) in src.iter_mut().zip(&idx) {
            *s = inv[i];
        }
        out.entry_mut(&idx).copy_from_slice(x.entry(&src));
    }
    Ok(out)
}

/// Dense order-2 encoding of a graph. Channel 0 is the symmetric binary
/// adjacency, channel 1 indicates diagonal (node) entries, and remaining
/// channels carry node features on the diagonal and edge features at edge
/// positions, zero elsewhere.
pub fn graph_to_dense(g: &Graph) -> DenseTensor {
    let c = g.feature_width();
    let mut x = DenseTensor::zeros(2, g.n(), 2 + c);
    for v in 0..g.n() {
        x.entry_mut(&[v, v])[1] = 1.0;
        if let Some(f) = g.node_features() {
            x.entry_mut(&[v, v])[2..].copy_from_slice(f.row(v));
        }
    }
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        x.entry_mut(&[u, v])[0] = 1.0;
        x.entry_mut(&[v, u])[0] = 1.0;
        if let Some(f) = g.edge_features() {
            x.entry_mut(&[u, v])[2..].copy_from_slice(f.row(e));
            x.entry_mut(&[v, u])[2..].copy_from_slice(f.row(e));
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Line-delimited text format: a JSON header record, one record per node, then
// one record per edge. Round-trips losslessly.
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct HeaderRecord {
    n: usize,
    feat_dim_node: usize,
    feat_dim_edge: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct NodeRecord {
    v: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    feat: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct EdgeRecord {
    u: usize,
    v: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    feat: Vec<f64>,
}

pub fn graph_to_string(g: &Graph) -> String {
    let header = HeaderRecord {
        n: g.n(),
        feat_dim_node: g.node_features().map_or(0, |f| f.cols()),
        feat_dim_edge: g.edge_features().map_or(0, |f| f.cols()),
    };
    let mut out = String::new();
    writeln!(out, "{}", serde_json::to_string(&header).unwrap()).unwrap();
    for v in 0..g.n() {
        let rec = NodeRecord {
            v,
            feat: g.node_features().map_or(Vec::new(), |f| f.row(v).to_vec()),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
    }
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let rec = EdgeRecord {
            u,
            v,
            feat: g.edge_features().map_or(Vec::new(), |f| f.row(e).to_vec()),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
    }
    out
}

pub fn graph_from_str(text: &str) -> Result<Graph, GraphError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (line_no, header_line) = lines.next().ok_or(GraphError::Parse {
        line: 0,
        reason: "empty input".into(),
    })?;
    let header: HeaderRecord =
        serde_json::from_str(header_line).map_err(|e| GraphError::Parse {
            line: line_no + 1,
            reason: e.to_string(),
        })?;
    let mut node_rows: Vec<Vec<f64>> = vec![Vec::new(); header.n];
    for _ in 0..header.n {
        let (line_no, line) = lines.next().ok_or(GraphError::Parse {
            line: 0,
            reason: "missing node record".into(),
        })?;
        let rec: NodeRecord = serde_json::from_str(line).map_err(|e| GraphError::Parse {
            line: line_no + 1,
            reason: e.to_string(),
        })?;
        if rec.v >= header.n || rec.feat.len() != header.feat_dim_node {
            return Err(GraphError::Parse {
                line: line_no + 1,
                reason: "node record inconsistent with header".into(),
            });
        }
        node_rows[rec.v] = rec.feat;
    }
    let mut edges = Vec::new();
    let mut edge_rows = Vec::new();
    for (line_no, line) in lines {
        let rec: EdgeRecord = serde_json::from_str(line).map_err(|e| GraphError::Parse {
            line: line_no + 1,
            reason: e.to_string(),
        })?;
        if rec.feat.len() != header.feat_dim_edge {
            return Err(GraphError::Parse {
                line: line_no + 1,
                reason: "edge feature width inconsistent with header".into(),
            });
        }
        edges.push((rec.u, rec.v));
        edge_rows.push(rec.feat);
    }
    let node_features = if header.feat_dim_node > 0 {
        Some(Matrix::from_rows(&node_rows)?)
    } else {
        None
    };
    let edge_features = if header.feat_dim_edge > 0 {
        Some(Matrix::from_rows(&edge_rows)?)
    } else {
        None
    };
    Graph::new(header.n, edges, node_features, edge_features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sym_eig;
    use proptest::prelude::*;

    fn path3() -> Graph {
        Graph::new(3, vec![(0, 1), (1, 2)], None, None).unwrap()
    }

    #[test]
    fn ba_edge_count() {
        let g = barabasi_albert(10, 2, RngSeed(1)).unwrap();
        assert_eq!(g.n(), 10);
        assert_eq!(g.m(), 16);
    }

    #[test]
    fn ba_deterministic() {
        let a = barabasi_albert(12, 3, RngSeed(5)).unwrap();
        let b = barabasi_albert(12, 3, RngSeed(5)).unwrap();
        assert_eq!(a.edges(), b.edges());
    }

    #[test]
    fn ba_rejects_k_geq_n() {
        assert!(barabasi_albert(3, 3, RngSeed(0)).is_err());
    }

    #[test]
    fn ba_is_connected() {
        for s in 0..20 {
            let g = barabasi_albert(15, 2, RngSeed(s)).unwrap();
            let d = hop_distances(&g);
            for j in 0..15 {
                assert!(d.get(0, j).is_finite(), "seed {s} disconnected");
            }
        }
    }

    #[test]
    fn laplacian_single_edge() {
        let g = Graph::new(2, vec![(0, 1)], None, None).unwrap();
        let l = normalized_laplacian(&g);
        let expect =
            Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!(l.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn laplacian_isolated_nodes_give_identity() {
        let g = Graph::new(3, vec![], None, None).unwrap();
        let l = normalized_laplacian(&g);
        assert!(l.max_abs_diff(&Matrix::identity(3)) < 1e-15);
    }

    #[test]
    fn laplacian_triangle_nullspace() {
        let g = Graph::new(3, vec![(0, 1), (1, 2), (0, 2)], None, None).unwrap();
        let l = normalized_laplacian(&g);
        let (vals, vecs) = sym_eig(&l).unwrap();
        assert!(vals[0].abs() < 1e-10);
        // Null eigenvector proportional to D^{1/2} 1 = sqrt(2) * 1.
        let v0 = vecs.column(0);
        let first = v0[0];
        for &x in &v0 {
            assert!((x - first).abs() < 1e-8);
        }
    }

    #[test]
    fn laplacian_eigenvalues_in_range() {
        for s in 0..5 {
            let g = barabasi_albert(12, 2, RngSeed(s + 100)).unwrap();
            let (vals, _) = sym_eig(&normalized_laplacian(&g)).unwrap();
            for &v in &vals {
                assert!(v >= -1e-9 && v <= 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn hop_distance_path() {
        let d = hop_distances(&path3());
        assert_eq!(d.get(0, 2), 2.0);
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0.0);
        }
    }

    #[test]
    fn hop_distance_unreachable_sentinel() {
        let g = Graph::new(2, vec![], None, None).unwrap();
        let d = hop_distances(&g);
        assert_eq!(d.get(0, 1), UNREACHABLE);
    }

    #[test]
    fn hop_distance_symmetric_triangle_inequality() {
        let g = barabasi_albert(14, 2, RngSeed(77)).unwrap();
        let d = hop_distances(&g);
        let n = g.n();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(d.get(i, j), d.get(j, i));
                for k in 0..n {
                    assert!(d.get(i, j) <= d.get(i, k) + d.get(k, j));
                }
            }
        }
    }

    #[test]
    fn permute_graph_identity_and_inverse() {
        let g = barabasi_albert(8, 2, RngSeed(3)).unwrap();
        let id: Vec<usize> = (0..8).collect();
        assert_eq!(permute_graph(&g, &id).unwrap(), g);
        let pi = vec![3, 1, 0, 2, 7, 6, 5, 4];
        let back = permute_graph(&permute_graph(&g, &pi).unwrap(), &invert_permutation(&pi))
            .unwrap();
        let mut a = back.edges().to_vec();
        let mut b = g.edges().to_vec();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn permute_graph_degree_sequence_preserved() {
        let g = path3();
        let h = permute_graph(&g, &[2, 1, 0]).unwrap();
        let mut dg = g.degrees();
        let mut dh = h.degrees();
        dg.sort_unstable();
        dh.sort_unstable();
        assert_eq!(dg, dh);
    }

    #[test]
    fn permute_graph_rejects_non_bijection() {
        let g = path3();
        assert!(permute_graph(&g, &[0, 0, 1]).is_err());
    }

    #[test]
    fn permute_tensor_order1_swap() {
        let mut x = DenseTensor::zeros(1, 2, 1);
        x.entry_mut(&[0])[0] = 5.0;
        x.entry_mut(&[1])[0] = 7.0;
        let y = permute_tensor(&x, &[1, 0]).unwrap();
        assert_eq!(y.get(&[0], 0), 7.0);
        assert_eq!(y.get(&[1], 0), 5.0);
    }

    #[test]
    fn permute_tensor_matches_permuted_graph_adjacency() {
        let g = path3();
        let pi = vec![2, 1, 0];
        let lhs = graph_to_dense(&permute_graph(&g, &pi).unwrap());
        let rhs = permute_tensor(&graph_to_dense(&g), &pi).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-15);
    }

    #[test]
    fn dense_layout_single_edge() {
        let g = Graph::new(2, vec![(0, 1)], None, None).unwrap();
        let x = graph_to_dense(&g);
        assert_eq!(x.channels(), 2);
        assert_eq!(x.get(&[0, 1], 0), 1.0);
        assert_eq!(x.get(&[1, 0], 0), 1.0);
        assert_eq!(x.get(&[0, 0], 0), 0.0);
        assert_eq!(x.get(&[0, 0], 1), 1.0);
        assert_eq!(x.get(&[1, 1], 1), 1.0);
        assert_eq!(x.get(&[0, 1], 1), 0.0);
    }

    #[test]
    fn dense_layout_empty_graph() {
        let g = Graph::new(3, vec![], None, None).unwrap();
        let x = graph_to_dense(&g);
        for f in 0..9 {
            let idx = x.multi_index(f);
            assert_eq!(x.get(&idx, 0), 0.0);
        }
    }

    #[test]
    fn graph_roundtrip_with_features() {
        let nf = Matrix::from_rows(&[vec![1.0, 2.5], vec![0.25, -3.0], vec![0.0, 0.125]]).unwrap();
        let ef = Matrix::from_rows(&[vec![7.0, 0.5], vec![-1.0, 2.0]]).unwrap();
        let g = Graph::new(3, vec![(0, 1), (1, 2)], Some(nf), Some(ef)).unwrap();
        let text = graph_to_string(&g);
        let back = graph_from_str(&text).unwrap();
        assert_eq!(g, back);
        // Byte-identical re-serialization.
        assert_eq!(text, graph_to_string(&back));
    }

    #[test]
    fn graph_rejects_bad_edges() {
        assert!(Graph::new(2, vec![(0, 2)], None, None).is_err());
        assert!(Graph::new(3, vec![(0, 1), (1, 0)], None, None).is_err());
    }

    #[test]
    fn ba_node_count_statistic() {
        // n ~ U(10, 20) should average 15.0.
        let mut rng = RngSeed(123).rng();
        let mut total = 0usize;
        for i in 0..1000 {
            let n = rand::Rng::gen_range(&mut rng, 10..=20);
            let k = rand::Rng::gen_range(&mut rng, 2..=3);
            let g = barabasi_albert(n, k, RngSeed(123).child(i)).unwrap();
            total += g.n();
        }
        let mean = total as f64 / 1000.0;
        assert!((mean - 15.0).abs() <= 0.5, "mean node count {mean}");
    }

    proptest! {
        #[test]
        fn permute_tensor_roundtrip(seed in 0u64..50, n in 2usize..5) {
            let g = barabasi_albert(n.max(3), 2, RngSeed(seed)).unwrap();
            let x = graph_to_dense(&g);
            let mut pi: Vec<usize> = (0..g.n()).collect();
            // Derive a permutation from the seed.
            let mut rng = RngSeed(seed).child(1).rng();
            for i in (1..pi.len()).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=i);
                pi.swap(i, j);
            }
            let y = permute_tensor(&permute_tensor(&x, &pi).unwrap(), &invert_permutation(&pi)).unwrap();
            prop_assert!(x.max_abs_diff(&y) == 0.0);
        }
    }
}
