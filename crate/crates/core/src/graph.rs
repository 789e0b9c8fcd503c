//! Undirected attributed graphs, neighborhood queries and mini-batch
//! subgraph sampling.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Node class. Bots are the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Human = 0,
    Bot = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Human),
            1 => Some(Label::Bot),
            _ => None,
        }
    }

    #[inline]
    pub fn is_bot(self) -> bool {
        self == Label::Bot
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Immutable undirected graph with per-node features and optional labels.
///
/// Adjacency is stored as sorted neighbor lists in CSR form. Self-loops are
/// never stored; consumers that need them add them logically.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    domain_id: usize,
    offsets: Vec<usize>,
    adjacency: Vec<usize>,
    features: Matrix,
    labels: Option<Vec<Label>>,
    // Generative class before label noise. Evaluation-only.
    classes: Option<Vec<Label>>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Each edge must appear
    /// once (in either orientation); self-loops and out-of-range endpoints
    /// are rejected.
    pub fn from_edges(
        domain_id: usize,
        features: Matrix,
        labels: Option<Vec<Label>>,
        edges: &[(usize, usize)],
    ) -> Result<Graph> {
        let n = features.rows();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::input(format!("{} labels for {n} nodes", l.len())));
            }
        }
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::input(format!("edge ({u},{v}) out of range for {n} nodes")));
            }
            if u == v {
                return Err(Error::input(format!("self-loop on node {u}")));
            }
            lists[u].push(v);
            lists[v].push(u);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut adjacency = Vec::with_capacity(edges.len() * 2);
        offsets.push(0);
        for (u, mut list) in lists.into_iter().enumerate() {
            list.sort_unstable();
            if let Some(w) = list.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::input(format!("duplicate edge ({u},{})", w[0])));
            }
            adjacency.extend_from_slice(&list);
            offsets.push(adjacency.len());
        }
        Ok(Graph {
            domain_id,
            offsets,
            adjacency,
            features,
            labels,
            classes: None,
        })
    }

    pub(crate) fn with_classes(mut self, classes: Vec<Label>) -> Graph {
        debug_assert_eq!(classes.len(), self.num_nodes());
        self.classes = Some(classes);
        self
    }

    pub(crate) fn set_domain_id(&mut self, id: usize) {
        self.domain_id = id;
    }

    pub(crate) fn take_labels(&mut self) -> Option<Vec<Label>> {
        self.labels.take()
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.len() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    /// Generative classes prior to any label noise, when known.
    pub fn latent_classes(&self) -> Option<&[Label]> {
        self.classes.as_deref()
    }

    /// Sorted neighbor list. Panics on an out-of-range node.
    #[inline]
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> Result<usize> {
        self.check_node(node)?;
        Ok(self.offsets[node + 1] - self.offsets[node])
    }

    #[inline]
    pub(crate) fn degree_unchecked(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.num_nodes() && self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes())
            .flat_map(move |u| self.neighbors(u).iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.num_nodes() {
            return Err(Error::input(format!(
                "node {node} out of range for graph with {} nodes",
                self.num_nodes()
            )));
        }
        Ok(())
    }

    /// Nodes within `hops` of `center`, ordered by (distance, id).
    pub fn ball(&self, center: usize, hops: usize) -> Result<Vec<usize>> {
        self.check_node(center)?;
        Ok(self.ball_layers(&[center], hops).concat())
    }

    // BFS layers from a seed set; layer 0 is the (sorted, deduplicated) seed set.
    fn ball_layers(&self, seeds: &[usize], hops: usize) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.num_nodes()];
        let mut layer: Vec<usize> = seeds.to_vec();
        layer.sort_unstable();
        layer.dedup();
        for &s in &layer {
            seen[s] = true;
        }
        let mut layers = vec![layer];
        for _ in 0..hops {
            let mut next = Vec::new();
            for &u in layers.last().expect("non-empty") {
                for &v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        next.push(v);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            next.sort_unstable();
            layers.push(next);
        }
        layers
    }

    /// Induced subgraph on `nodes` (local id i maps to `nodes[i]`). Features,
    /// labels and latent classes are carried over.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Graph> {
        let mut local = vec![usize::MAX; self.num_nodes()];
        for (i, &g) in nodes.iter().enumerate() {
            self.check_node(g)?;
            if local[g] != usize::MAX {
                return Err(Error::input(format!("node {g} listed twice")));
            }
            local[g] = i;
        }
        let mut edges = Vec::new();
        for (i, &g) in nodes.iter().enumerate() {
            for &h in self.neighbors(g) {
                let j = local[h];
                if j != usize::MAX && i < j {
                    edges.push((i, j));
                }
            }
        }
        let features = self.features.gather_rows(nodes);
        let pick = |v: &Vec<Label>| nodes.iter().map(|&g| v[g]).collect::<Vec<_>>();
        let mut sub = Graph::from_edges(self.domain_id, features, self.labels.as_ref().map(pick), &edges)?;
        sub.classes = self.classes.as_ref().map(pick);
        Ok(sub)
    }

    /// Induced subgraph on all nodes within `hops` of `center`. The center is
    /// local node 0.
    pub fn ego_network(&self, center: usize, hops: usize) -> Result<Graph> {
        if hops == 0 {
            return Err(Error::input("ego network needs hops >= 1"));
        }
        let nodes = self.ball(center, hops)?;
        self.induced_subgraph(&nodes)
    }

    /// Fraction of edges whose endpoints share a label. `None` without labels
    /// or edges.
    pub fn edge_homophily(&self) -> Option<f64> {
        self.labels().and_then(|l| edge_homophily_with(self, l))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "nodes {} dim {}", self.num_nodes(), self.feature_dim());
        for v in 0..self.num_nodes() {
            s.push_str("feat ");
            s.push_str(&v.to_string());
            for x in self.features.row(v) {
                let _ = write!(s, " {x}");
            }
            s.push('\n');
        }
        if let Some(labels) = &self.labels {
            for (v, l) in labels.iter().enumerate() {
                let _ = writeln!(s, "label {v} {}", *l as u8);
            }
        }
        for (u, v) in self.edges() {
            let _ = writeln!(s, "edge {u} {v}");
        }
        s
    }

    pub fn parse(text: &str, origin: &str, domain_id: usize) -> Result<Graph> {
        let err = |line: usize, reason: String| Error::Parse {
            path: origin.to_string(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let (n, d) = match h.as_slice() {
            ["nodes", n, "dim", d] => (
                n.parse::<usize>().map_err(|e| err(hl + 1, format!("node count: {e}")))?,
                d.parse::<usize>().map_err(|e| err(hl + 1, format!("dim: {e}")))?,
            ),
            _ => return Err(err(hl + 1, "expected `nodes <n> dim <d>`".into())),
        };
        let mut features = Matrix::zeros(n, d);
        let mut have_feat = vec![false; n];
        let mut labels: Vec<Option<Label>> = vec![None; n];
        let mut any_label = false;
        let mut edges = Vec::new();
        let mut seen_edges = std::collections::HashSet::new();
        for (ln, line) in lines {
            let ln = ln + 1;
            let mut tok = line.split_whitespace();
            let kind = tok.next().unwrap_or_default();
            let node = |t: Option<&str>| -> Result<usize> {
                let v: usize = t
                    .ok_or_else(|| err(ln, "missing node id".into()))?
                    .parse()
                    .map_err(|e| err(ln, format!("node id: {e}")))?;
                if v >= n {
                    return Err(err(ln, format!("node {v} out of range")));
                }
                Ok(v)
            };
            match kind {
                "feat" => {
                    let v = node(tok.next())?;
                    let vals: Vec<f64> = tok
                        .map(|t| t.parse::<f64>().map_err(|e| err(ln, format!("feature: {e}"))))
                        .collect::<Result<_>>()?;
                    if vals.len() != d {
                        return Err(err(ln, format!("{} features, expected {d}", vals.len())));
                    }
                    if have_feat[v] {
                        return Err(err(ln, format!("features for node {v} repeated")));
                    }
                    have_feat[v] = true;
                    features.row_mut(v).copy_from_slice(&vals);
                }
                "label" => {
                    let v = node(tok.next())?;
                    let l = tok
                        .next()
                        .and_then(|t| t.parse::<u8>().ok())
                        .and_then(Label::from_u8)
                        .ok_or_else(|| err(ln, "label must be 0 or 1".into()))?;
                    if labels[v].is_some() {
                        return Err(err(ln, format!("label for node {v} repeated")));
                    }
                    labels[v] = Some(l);
                    any_label = true;
                }
                "edge" => {
                    let u = node(tok.next())?;
                    let v = node(tok.next())?;
                    if u >= v {
                        return Err(err(ln, format!("edge ({u},{v}) must satisfy u < v")));
                    }
                    if !seen_edges.insert((u, v)) {
                        return Err(err(ln, format!("duplicate edge ({u},{v})")));
                    }
                    edges.push((u, v));
                }
                other => return Err(err(ln, format!("unknown record `{other}`"))),
            }
        }
        if let Some(v) = have_feat.iter().position(|f| !f) {
            return Err(err(0, format!("no features for node {v}")));
        }
        let labels = if any_label {
            Some(
                labels
                    .into_iter()
                    .enumerate()
                    .map(|(v, l)| l.ok_or_else(|| err(0, format!("no label for node {v}"))))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Graph::from_edges(domain_id, features, labels, &edges)
    }

    pub fn load(path: &Path, domain_id: usize) -> Result<Graph> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Graph::parse(&text, &path.display().to_string(), domain_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn edge_homophily_with(g: &Graph, labels: &[Label]) -> Option<f64> {
    let (same, total) = g
        .edges()
        .fold((0usize, 0usize), |(s, t), (u, v)| (s + usize::from(labels[u] == labels[v]), t + 1));
    (total > 0).then(|| same as f64 / total as f64)
}

/// Mini-batch of center nodes together with the 2-hop closure a 2-layer
/// encoder needs.
///
/// Local node order is: centers, then the remaining 1-hop ring, then the
/// 2-hop ring. `nodes[i]` is the parent id of local node `i`.
#[derive(Debug, Clone)]
pub struct Subbatch {
    pub domain_id: usize,
    pub centers: Vec<usize>,
    pub nodes: Vec<usize>,
    pub hop1_len: usize,
    pub subgraph: Graph,
    /// Degrees in the parent graph; GCN normalization uses these so that
    /// batch embeddings equal full-graph embeddings.
    pub parent_degrees: Vec<usize>,
}

impl Subbatch {
    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    /// Builds the batch for an explicit set of centers.
    pub fn for_centers(graph: &Graph, centers: &[usize]) -> Result<Subbatch> {
        for &c in centers {
            graph.check_node(c)?;
        }
        let layers = graph.ball_layers(centers, 2);
        let centers = layers[0].clone();
        let hop1_len = centers.len() + layers.get(1).map_or(0, Vec::len);
        let nodes = layers.concat();
        let subgraph = graph.induced_subgraph(&nodes)?;
        let parent_degrees = nodes.iter().map(|&v| graph.degree_unchecked(v)).collect();
        Ok(Subbatch {
            domain_id: graph.domain_id(),
            centers,
            nodes,
            hop1_len,
            subgraph,
            parent_degrees,
        })
    }
}

/// Draws `batch_size` centers uniformly without replacement (all nodes when
/// the graph is smaller) and attaches the 2-hop closure.
pub fn sample_subbatch(graph: &Graph, batch_size: usize, seed: u64) -> Result<Subbatch> {
    let n = graph.num_nodes();
    let k = batch_size.max(1).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = rand::seq::index::sample(&mut rng, n, k).into_vec();
    Subbatch::for_centers(graph, &centers)
}

/// Plain BFS distances; `usize::MAX` for unreachable nodes.
pub fn bfs_distances(graph: &Graph, source: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; graph.num_nodes()];
    let mut queue = VecDeque::from([source]);
    dist[source] = 0;
    while let Some(u) = queue.pop_front() {
        for &v in graph.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(0, Matrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64), None, edges).unwrap()
    }

    #[test]
    fn degrees() {
        let k3 = plain(3, &[(0, 1), (1, 2), (0, 2)]);
        assert!((0..3).all(|v| k3.degree(v).unwrap() == 2));
        let iso = plain(1, &[]);
        assert_eq!(iso.degree(0).unwrap(), 0);
        let star = plain(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        assert_eq!(star.degree(0).unwrap(), 4);
        assert!(matches!(star.degree(5), Err(Error::Input(_))));
    }

    #[test]
    fn rejects_bad_edges() {
        let f = Matrix::zeros(3, 1);
        assert!(Graph::from_edges(0, f.clone(), None, &[(0, 0)]).is_err());
        assert!(Graph::from_edges(0, f.clone(), None, &[(0, 1), (1, 0)]).is_err());
        assert!(Graph::from_edges(0, f, None, &[(0, 3)]).is_err());
    }

    #[test]
    fn ego_network_of_path_and_isolated_node() {
        let p = plain(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let ego = p.ego_network(2, 3).unwrap();
        assert_eq!(ego.num_nodes(), 5);
        assert_eq!(ego.num_edges(), 4);
        let iso = plain(1, &[]);
        let e = iso.ego_network(0, 3).unwrap();
        assert_eq!((e.num_nodes(), e.num_edges()), (1, 0));
        assert!(p.ego_network(9, 1).is_err());
        assert!(p.ego_network(0, 0).is_err());
    }

    #[test]
    fn subbatch_clamps_and_is_deterministic() {
        let p = plain(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let b = sample_subbatch(&p, 10, 3).unwrap();
        assert_eq!(b.centers, vec![0, 1, 2, 3, 4]);
        let a = sample_subbatch(&p, 2, 11).unwrap();
        let c = sample_subbatch(&p, 2, 11).unwrap();
        assert_eq!(a.centers, c.centers);
        assert_eq!(a.nodes, c.nodes);
    }

    #[test]
    fn text_round_trip() {
        let g = Graph::from_edges(
            0,
            Matrix::from_fn(3, 2, |i, j| 0.1 * i as f64 - j as f64 / 3.0),
            Some(vec![Label::Bot, Label::Human, Label::Bot]),
            &[(0, 2), (1, 2)],
        )
        .unwrap();
        let back = Graph::parse(&g.to_text(), "mem", 0).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn parser_rejects_duplicate_and_reversed_edges() {
        let head = "nodes 2 dim 1\nfeat 0 1\nfeat 1 2\n";
        assert!(Graph::parse(&format!("{head}edge 0 1\nedge 0 1\n"), "m", 0).is_err());
        assert!(Graph::parse(&format!("{head}edge 1 0\n"), "m", 0).is_err());
        assert!(Graph::parse(&format!("{head}edge 0 1\n"), "m", 0).is_ok());
        assert!(Graph::parse("nodes 2 dim 1\nfeat 0 1\n", "m", 0).is_err());
    }
}
