//! Thresholded cosine-similarity graphs with per-cluster mean nodes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignment;
use crate::diffcore::{Container, Tensor};
use crate::embed::EmbeddingTable;
use crate::error::{invalid, Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.75;

/// `a.b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            expected: vec![a.len()],
            found: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(Error::ZeroNorm { index: 0 });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm { index: 1 });
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    /// Training-set image index; `None` marks a mean node.
    pub image: Option<usize>,
    pub class: usize,
    pub cluster: usize,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

impl Node {
    pub fn is_mean(&self) -> bool {
        self.image.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    #[serde(skip)]
    pub weight: f64,
}

/// Undirected weighted graph. Node ids equal positions in `nodes`; every
/// edge is stored once with `u < v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    pub threshold: f64,
    pub embedder: String,
    pub cluster_algorithm: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    /// Candidate images dropped for having no qualifying neighbor, per class.
    pub filtered: BTreeMap<usize, usize>,
}

impl SimilarityGraph {
    pub fn empty(threshold: f64) -> Self {
        SimilarityGraph {
            threshold,
            embedder: String::new(),
            cluster_algorithm: String::new(),
            nodes: Vec::new(),
            edges: Vec::new(),
            filtered: BTreeMap::new(),
        }
    }

    pub fn seed_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| !n.is_mean())
    }

    pub fn mean_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.is_mean())
    }

    /// Neighbor lists `(node, weight)` for every node, in edge order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.u].push((e.v, e.weight));
            adj[e.v].push((e.u, e.weight));
        }
        adj
    }

    pub fn node_image_map(&self) -> NodeImageMap {
        NodeImageMap {
            map: self
                .nodes
                .iter()
                .filter_map(|n| n.image.map(|i| (n.id, i)))
                .collect(),
        }
    }

    /// Check the structural invariants; used after loading.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Format(format!("node at position {i} has id {}", n.id)));
            }
            if let Some(img) = n.image {
                if !seen.insert(img) {
                    return Err(Error::Format(format!("image {img} appears twice")));
                }
            }
        }
        let mut pairs = BTreeSet::new();
        for e in &self.edges {
            if e.u >= e.v || e.v >= self.nodes.len() {
                return Err(Error::Format(format!("bad edge ({}, {})", e.u, e.v)));
            }
            if !pairs.insert((e.u, e.v)) {
                return Err(Error::Format(format!("duplicate edge ({}, {})", e.u, e.v)));
            }
        }
        Ok(())
    }
}

/// Node id to training-image index, for non-mean nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeImageMap {
    pub map: BTreeMap<usize, usize>,
}

impl NodeImageMap {
    pub fn image(&self, node: usize) -> Option<usize> {
        self.map.get(&node).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn push_edge(edges: &mut Vec<Edge>, a: usize, b: usize, weight: f64) {
    let (u, v) = if a < b { (a, b) } else { (b, a) };
    edges.push(Edge { u, v, weight });
}

/// Graph of one class: within-cluster edges with cosine `>= threshold`,
/// neighbor-less images dropped, and one mean node per cluster linked to its
/// members and to the other mean nodes.
///
/// `emb` holds exactly the class's rows and `clusters` labels those rows.
pub fn build_class_graph(
    emb: &EmbeddingTable,
    clusters: &ClusterAssignment,
    class_id: usize,
    threshold: f64,
) -> Result<SimilarityGraph> {
    if emb.is_empty() {
        return Err(Error::EmptyClass(class_id));
    }
    if clusters.labels.len() != emb.len() {
        return Err(invalid(format!(
            "{} cluster labels for {} embeddings",
            clusters.labels.len(),
            emb.len()
        )));
    }
    let n = emb.len();
    let mut candidate_edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if clusters.labels[i] != clusters.labels[j] {
                continue;
            }
            let s = cosine_similarity(emb.row(i), emb.row(j)).map_err(|_| Error::ZeroNorm {
                index: emb.indices()[if emb.row(i).iter().all(|v| *v == 0.0) { i } else { j }],
            })?;
            if s >= threshold {
                candidate_edges.push((i, j, s));
            }
        }
    }
    let mut keep = vec![false; n];
    for &(i, j, _) in &candidate_edges {
        keep[i] = true;
        keep[j] = true;
    }
    let mut node_of = vec![usize::MAX; n];
    let mut nodes = Vec::new();
    for i in (0..n).filter(|&i| keep[i]) {
        node_of[i] = nodes.len();
        nodes.push(Node {
            id: nodes.len(),
            image: Some(emb.indices()[i]),
            class: class_id,
            cluster: clusters.labels[i],
            embedding: emb.row(i).to_vec(),
        });
    }
    let mut edges: Vec<Edge> = Vec::new();
    for &(i, j, s) in &candidate_edges {
        push_edge(&mut edges, node_of[i], node_of[j], s);
    }
    let first_mean = nodes.len();
    for (c, cent) in clusters.centroids.iter().enumerate() {
        nodes.push(Node {
            id: nodes.len(),
            image: None,
            class: class_id,
            cluster: c,
            embedding: cent.clone(),
        });
    }
    for (c, cent) in clusters.centroids.iter().enumerate() {
        let m = first_mean + c;
        for i in (0..n).filter(|&i| keep[i] && clusters.labels[i] == c) {
            push_edge(&mut edges, m, node_of[i], cosine_similarity(cent, emb.row(i))?);
        }
    }
    for a in 0..clusters.k {
        for b in a + 1..clusters.k {
            let w = cosine_similarity(&clusters.centroids[a], &clusters.centroids[b])?;
            push_edge(&mut edges, first_mean + a, first_mean + b, w);
        }
    }
    edges.sort_by_key(|e| (e.u, e.v));
    let mut filtered = BTreeMap::new();
    filtered.insert(class_id, keep.iter().filter(|k| !**k).count());
    Ok(SimilarityGraph {
        threshold,
        embedder: emb.method().name().to_string(),
        cluster_algorithm: String::new(),
        nodes,
        edges,
        filtered,
    })
}

/// Union of per-class graphs with ids re-keyed in input order and every
/// pair of mean nodes from different classes linked.
pub fn merge_graphs(graphs: &[SimilarityGraph]) -> Result<SimilarityGraph> {
    let Some(first) = graphs.first() else {
        return Err(invalid("nothing to merge"));
    };
    let mut out = SimilarityGraph {
        threshold: first.threshold,
        embedder: first.embedder.clone(),
        cluster_algorithm: first.cluster_algorithm.clone(),
        nodes: Vec::new(),
        edges: Vec::new(),
        filtered: BTreeMap::new(),
    };
    let mut images = BTreeSet::new();
    let mut classes = BTreeSet::new();
    let mut means: Vec<(usize, usize)> = Vec::new();
    for g in graphs {
        if g.threshold.to_bits() != first.threshold.to_bits() {
            return Err(invalid("graphs built with different thresholds"));
        }
        let offset = out.nodes.len();
        let own: BTreeSet<usize> = g.nodes.iter().map(|n| n.class).collect();
        if let Some(c) = own.iter().find(|c| classes.contains(*c)) {
            return Err(invalid(format!("class {c} appears in more than one graph")));
        }
        for n in &g.nodes {
            if let Some(img) = n.image {
                if !images.insert(img) {
                    return Err(invalid(format!("image {img} appears in more than one graph")));
                }
            }
            let mut n = n.clone();
            n.id += offset;
            if n.is_mean() {
                means.push((n.id, n.class));
            }
            out.nodes.push(n);
        }
        out.edges.extend(g.edges.iter().map(|e| Edge {
            u: e.u + offset,
            v: e.v + offset,
            weight: e.weight,
        }));
        for (c, f) in &g.filtered {
            *out.filtered.entry(*c).or_default() += f;
        }
        classes.extend(own);
    }
    for (a, &(ma, ca)) in means.iter().enumerate() {
        for &(mb, cb) in &means[a + 1..] {
            if ca != cb {
                let w = cosine_similarity(&out.nodes[ma].embedding, &out.nodes[mb].embedding)?;
                push_edge(&mut out.edges, ma, mb, w);
            }
        }
    }
    out.edges.sort_by_key(|e| (e.u, e.v));
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub nodes: usize,
    pub edges: usize,
    pub filtered: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    /// Seed node count: non-mean nodes.
    pub snc: usize,
    /// Neighbor cap applied when sampling.
    pub snnc: usize,
    /// Largest number of non-mean neighbors of any seed node.
    pub max_degree: usize,
    pub filtered: usize,
    pub candidates: usize,
    pub mean_nodes: usize,
    pub edges: usize,
    /// Per class: seed nodes, edges between its seed nodes, filtered images.
    pub per_class: BTreeMap<usize, ClassTally>,
}

pub fn graph_stats(g: &SimilarityGraph, neighbor_cap: usize) -> GraphStats {
    let mut s = GraphStats {
        snnc: neighbor_cap,
        edges: g.edges.len(),
        ..Default::default()
    };
    let mut degree = vec![0usize; g.nodes.len()];
    for e in &g.edges {
        let (a, b) = (&g.nodes[e.u], &g.nodes[e.v]);
        if !a.is_mean() && !b.is_mean() {
            degree[e.u] += 1;
            degree[e.v] += 1;
            if a.class == b.class {
                s.per_class.entry(a.class).or_default().edges += 1;
            }
        }
    }
    for n in &g.nodes {
        if n.is_mean() {
            s.mean_nodes += 1;
        } else {
            s.snc += 1;
            s.max_degree = s.max_degree.max(degree[n.id]);
            s.per_class.entry(n.class).or_default().nodes += 1;
        }
    }
    for (&c, &f) in &g.filtered {
        s.per_class.entry(c).or_default().filtered = f;
        s.filtered += f;
    }
    s.candidates = s.snc + s.filtered;
    s
}

#[derive(Serialize, Deserialize)]
struct GraphHeader {
    threshold: f64,
    embedder: String,
    cluster_algorithm: String,
    dim: usize,
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
    filtered: BTreeMap<usize, usize>,
}

/// Container with the node and edge tables in the header and embeddings and
/// edge weights as tensors (absent when empty).
pub fn graph_to_container(g: &SimilarityGraph) -> Result<Container> {
    let dim = g.nodes.first().map_or(0, |n| n.embedding.len());
    let header = GraphHeader {
        threshold: g.threshold,
        embedder: g.embedder.clone(),
        cluster_algorithm: g.cluster_algorithm.clone(),
        dim,
        nodes: g.nodes.clone(),
        edges: g.edges.iter().map(|e| (e.u, e.v)).collect(),
        filtered: g.filtered.clone(),
    };
    let mut c = Container::new("graph", header)?;
    if !g.nodes.is_empty() {
        let rows: Vec<Vec<f64>> = g.nodes.iter().map(|n| n.embedding.clone()).collect();
        c.push("embeddings", Tensor::from_rows(&rows)?);
    }
    if !g.edges.is_empty() {
        let w: Vec<f64> = g.edges.iter().map(|e| e.weight).collect();
        c.push("edge_weights", Tensor::new(vec![w.len()], w)?);
    }
    Ok(c)
}

pub fn graph_from_container(c: Container) -> Result<SimilarityGraph> {
    let c = c.expect_kind("graph")?;
    let h: GraphHeader = c.header_as()?;
    let mut nodes = h.nodes;
    if !nodes.is_empty() {
        let emb = c
            .tensor("embeddings")
            .ok_or_else(|| Error::Format("graph has nodes but no embeddings".into()))?;
        if emb.rows() != nodes.len() || emb.row_len() != h.dim {
            return Err(Error::Format("embedding table does not match node table".into()));
        }
        for (i, n) in nodes.iter_mut().enumerate() {
            n.embedding = emb.row(i).to_vec();
        }
    }
    let mut edges = Vec::with_capacity(h.edges.len());
    if !h.edges.is_empty() {
        let w = c
            .tensor("edge_weights")
            .ok_or_else(|| Error::Format("graph has edges but no weights".into()))?;
        if w.len() != h.edges.len() {
            return Err(Error::Format("edge weight count does not match edge table".into()));
        }
        for (&(u, v), &weight) in h.edges.iter().zip(w.data()) {
            edges.push(Edge { u, v, weight });
        }
    }
    let g = SimilarityGraph {
        threshold: h.threshold,
        embedder: h.embedder,
        cluster_algorithm: h.cluster_algorithm,
        nodes,
        edges,
        filtered: h.filtered,
    };
    g.validate()?;
    Ok(g)
}

pub fn save_graph(g: &SimilarityGraph, path: impl AsRef<Path>) -> Result<()> {
    graph_to_container(g)?.write(path)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<SimilarityGraph> {
    graph_from_container(Container::read(path)?)
}

/// CSV edge list `u,v,weight,u_image,v_image,kind` for inspection.
pub fn write_edge_csv(g: &SimilarityGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["u", "v", "weight", "u_image", "v_image", "kind"])?;
    let img = |n: &Node| n.image.map_or(String::new(), |i| i.to_string());
    for e in &g.edges {
        let (a, b) = (&g.nodes[e.u], &g.nodes[e.v]);
        let kind = match (a.is_mean(), b.is_mean()) {
            (false, false) => "seed",
            (true, true) => "mean",
            _ => "member",
        };
        w.write_record([
            e.u.to_string(),
            e.v.to_string(),
            format!("{:?}", e.weight),
            img(a),
            img(b),
            kind.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
