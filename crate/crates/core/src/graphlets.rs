//! Graphlet orbit counts (connected graphlets on 2-4 nodes, orbits 0-14)
//! and graphlet-kernel similarities built on them.
//!
//! Orbit numbering:
//!
//! | graphlet        | orbits                                        |
//! |-----------------|-----------------------------------------------|
//! | edge            | 0                                             |
//! | path P3         | 1 end, 2 middle                               |
//! | triangle        | 3                                             |
//! | path P4         | 4 end, 5 inner                                |
//! | claw (3-star)   | 6 leaf, 7 center                              |
//! | 4-cycle         | 8                                             |
//! | paw             | 9 pendant, 10 triangle degree-2, 11 degree-3  |
//! | diamond         | 12 degree-2, 13 degree-3                      |
//! | K4              | 14                                            |

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::cosine;

pub const NUM_ORBITS: usize = 15;
pub const MAX_GRAPHLET_SIZE: usize = 4;
pub const EGO_HOPS: usize = 3;

pub type OrbitCounts = [u64; NUM_ORBITS];

/// Per-node graphlet degree vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GdvTable {
    rows: Vec<OrbitCounts>,
}

impl GdvTable {
    pub fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    pub fn node(&self, v: usize) -> &OrbitCounts {
        &self.rows[v]
    }

    pub fn rows(&self) -> &[OrbitCounts] {
        &self.rows
    }

    /// Column sums over all nodes.
    pub fn totals(&self) -> OrbitCounts {
        let mut t = [0u64; NUM_ORBITS];
        for r in &self.rows {
            for (a, b) in t.iter_mut().zip(r) {
                *a += b;
            }
        }
        t
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("node");
        for o in 0..NUM_ORBITS {
            let _ = write!(s, " orbit{o}");
        }
        s.push('\n');
        for (v, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{v}");
            for c in r {
                let _ = write!(s, " {c}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<GdvTable> {
        let bad = |line: usize, reason: &str| Error::Parse {
            path: "gdv table".into(),
            line,
            reason: reason.into(),
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.starts_with("node orbit0") => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let vals: Vec<u64> = line
                .split_whitespace()
                .map(|t| t.parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i + 2, "non-integer entry"))?;
            if vals.len() != NUM_ORBITS + 1 || vals[0] as usize != rows.len() {
                return Err(bad(i + 2, "malformed row"));
            }
            let mut r = [0u64; NUM_ORBITS];
            r.copy_from_slice(&vals[1..]);
            rows.push(r);
        }
        Ok(GdvTable { rows })
    }
}

/// Unit-norm orbit histogram of a node's 3-hop ego network (zero when the
/// ego network has no edges).
#[derive(Debug, Clone, PartialEq)]
pub struct EgoSignature(pub [f64; NUM_ORBITS]);

impl EgoSignature {
    pub fn from_counts(counts: &OrbitCounts) -> EgoSignature {
        let norm = counts.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt();
        let mut out = [0.0; NUM_ORBITS];
        if norm > 0.0 {
            for (o, &c) in out.iter_mut().zip(counts) {
                *o = c as f64 / norm;
            }
        }
        EgoSignature(out)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

/// Graphlet-kernel edge score: cosine of two signatures, in [0,1].
pub fn edge_score(a: &EgoSignature, b: &EgoSignature) -> f64 {
    cosine(&a.0, &b.0).clamp(0.0, 1.0)
}

// Enumerates every connected induced subgraph on 2..=4 nodes exactly once
// (ESU algorithm) and hands each node set to `visit`.
fn for_each_connected_subgraph(graph: &Graph, mut visit: impl FnMut(&[usize])) {
    fn extend(
        graph: &Graph,
        sub: &mut Vec<usize>,
        ext: Vec<usize>,
        root: usize,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if sub.len() >= 2 {
            visit(sub);
        }
        if sub.len() == MAX_GRAPHLET_SIZE {
            return;
        }
        let mut ext = ext;
        while let Some(w) = ext.pop() {
            let mut next = ext.clone();
            for &u in graph.neighbors(w) {
                if u <= root || sub.contains(&u) || next.contains(&u) {
                    continue;
                }
                // exclusive neighborhood: not adjacent to the current set
                if sub.iter().any(|&s| graph.has_edge(s, u)) {
                    continue;
                }
                next.push(u);
            }
            sub.push(w);
            extend(graph, sub, next, root, visit);
            sub.pop();
        }
    }
    let mut sub = Vec::with_capacity(MAX_GRAPHLET_SIZE);
    for root in 0..graph.num_nodes() {
        let ext: Vec<usize> = graph.neighbors(root).iter().copied().filter(|&u| u > root).collect();
        sub.push(root);
        extend(graph, &mut sub, ext, root, &mut visit);
        sub.pop();
    }
}

/// Orbit of each member of a connected induced subgraph, in member order.
fn classify(graph: &Graph, nodes: &[usize]) -> [usize; MAX_GRAPHLET_SIZE] {
    let k = nodes.len();
    let mut deg = [0usize; MAX_GRAPHLET_SIZE];
    let mut edges = 0;
    for i in 0..k {
        for j in i + 1..k {
            if graph.has_edge(nodes[i], nodes[j]) {
                deg[i] += 1;
                deg[j] += 1;
                edges += 1;
            }
        }
    }
    let mut orbit = [usize::MAX; MAX_GRAPHLET_SIZE];
    match (k, edges) {
        (2, 1) => orbit[..2].fill(0),
        (3, 2) => {
            for i in 0..3 {
                orbit[i] = if deg[i] == 2 { 2 } else { 1 };
            }
        }
        (3, 3) => orbit[..3].fill(3),
        (4, 3) => {
            let star = deg[..4].contains(&3);
            for i in 0..4 {
                orbit[i] = match (star, deg[i]) {
                    (false, 1) => 4,
                    (false, _) => 5,
                    (true, 1) => 6,
                    (true, _) => 7,
                };
            }
        }
        (4, 4) => {
            let cycle = deg[..4].iter().all(|&d| d == 2);
            for i in 0..4 {
                orbit[i] = if cycle {
                    8
                } else {
                    match deg[i] {
                        1 => 9,
                        2 => 10,
                        _ => 11,
                    }
                };
            }
        }
        (4, 5) => {
            for i in 0..4 {
                orbit[i] = if deg[i] == 2 { 12 } else { 13 };
            }
        }
        (4, 6) => orbit.fill(14),
        _ => unreachable!("disconnected or oversized node set {nodes:?}"),
    }
    orbit
}

/// Exact per-node orbit counts.
pub fn count_orbits(graph: &Graph) -> GdvTable {
    let mut rows = vec![[0u64; NUM_ORBITS]; graph.num_nodes()];
    for_each_connected_subgraph(graph, |nodes| {
        let orbit = classify(graph, nodes);
        for (i, &v) in nodes.iter().enumerate() {
            rows[v][orbit[i]] += 1;
        }
    });
    GdvTable { rows }
}

/// Signature of a single node, computed directly from its ego network.
pub fn ego_signature(graph: &Graph, node: usize) -> Result<EgoSignature> {
    let ego = graph.ego_network(node, EGO_HOPS)?;
    Ok(EgoSignature::from_counts(&count_orbits(&ego).totals()))
}

/// Signatures for every node.
///
/// Each connected subgraph is enumerated once on the whole graph and its
/// orbit histogram is credited to every node whose 3-hop ball contains all
/// of its members. This equals counting inside each ego network separately,
/// since an induced subgraph of the ball is an induced subgraph of the graph.
pub fn ego_signatures(graph: &Graph) -> Vec<EgoSignature> {
    let n = graph.num_nodes();
    let words = n.div_ceil(64);
    let mut balls = vec![0u64; n * words];
    for v in 0..n {
        let ball = graph.ball(v, EGO_HOPS).expect("node in range");
        let row = &mut balls[v * words..(v + 1) * words];
        for u in ball {
            row[u / 64] |= 1 << (u % 64);
        }
    }
    let mut acc = vec![[0u64; NUM_ORBITS]; n];
    let mut common = vec![0u64; words];
    for_each_connected_subgraph(graph, |nodes| {
        let orbit = classify(graph, nodes);
        let mut hist = [0u64; NUM_ORBITS];
        for &o in &orbit[..nodes.len()] {
            hist[o] += 1;
        }
        common.copy_from_slice(&balls[nodes[0] * words..(nodes[0] + 1) * words]);
        for &u in &nodes[1..] {
            for (c, b) in common.iter_mut().zip(&balls[u * words..(u + 1) * words]) {
                *c &= b;
            }
        }
        for (w, &bits) in common.iter().enumerate() {
            let mut bits = bits;
            while bits != 0 {
                let v = w * 64 + bits.trailing_zeros() as usize;
                bits &= bits - 1;
                for (o, &h) in hist.iter().enumerate() {
                    acc[v][o] += h;
                }
            }
        }
    });
    acc.iter().map(EgoSignature::from_counts).collect()
}

/// L1-normalized orbit histogram of a whole graph.
pub fn orbit_histogram(gdv: &GdvTable) -> [f64; NUM_ORBITS] {
    let totals = gdv.totals();
    let sum: u64 = totals.iter().sum();
    let mut out = [0.0; NUM_ORBITS];
    if sum > 0 {
        for (o, &t) in out.iter_mut().zip(&totals) {
            *o = t as f64 / sum as f64;
        }
    }
    out
}

/// Structural similarity of two graphs in [0,1].
pub fn domain_similarity(a: &Graph, b: &Graph) -> Result<f64> {
    if a.num_nodes() == 0 || b.num_nodes() == 0 {
        return Err(Error::input("domain similarity of an empty graph"));
    }
    Ok(histogram_similarity(&count_orbits(a), &count_orbits(b)))
}

/// Same as [`domain_similarity`] for precomputed tables.
pub fn histogram_similarity(a: &GdvTable, b: &GdvTable) -> f64 {
    cosine(&orbit_histogram(a), &orbit_histogram(b)).clamp(0.0, 1.0)
}

/// Content hash of a graph's canonical text form.
pub fn graph_hash(graph: &Graph) -> String {
    hex::encode(Sha256::digest(graph.to_text().as_bytes()))
}

/// Sidecar cache of ego signatures, keyed by graph hash.
pub fn write_signature_cache(path: &Path, hash: &str, sigs: &[EgoSignature]) -> Result<()> {
    let mut s = format!("hash {hash}\norbits {NUM_ORBITS}\n");
    for (v, sig) in sigs.iter().enumerate() {
        let _ = write!(s, "sig {v}");
        for x in &sig.0 {
            let _ = write!(s, " {x}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a signature cache. Returns `Ok(None)` when the cache belongs to a
/// different graph and an error when it is unreadable or malformed.
pub fn read_signature_cache(path: &Path, hash: &str, num_nodes: usize) -> Result<Option<Vec<EgoSignature>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, reason: &str| Error::Parse {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    };
    let mut lines = text.lines();
    let stored = lines
        .next()
        .and_then(|l| l.strip_prefix("hash "))
        .ok_or_else(|| bad(1, "missing hash"))?;
    if stored != hash {
        return Ok(None);
    }
    if lines.next() != Some(&format!("orbits {NUM_ORBITS}")) {
        return Err(bad(2, "orbit count mismatch"));
    }
    let mut sigs = Vec::with_capacity(num_nodes);
    for (i, line) in lines.enumerate() {
        let mut tok = line.split_whitespace();
        if tok.next() != Some("sig") || tok.next().and_then(|t| t.parse::<usize>().ok()) != Some(sigs.len()) {
            return Err(bad(i + 3, "malformed row"));
        }
        let vals: Vec<f64> = tok
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(i + 3, "bad value"))?;
        if vals.len() != NUM_ORBITS || vals.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(bad(i + 3, "bad signature"));
        }
        let mut sig = [0.0; NUM_ORBITS];
        sig.copy_from_slice(&vals);
        sigs.push(EgoSignature(sig));
    }
    if sigs.len() != num_nodes {
        return Err(bad(0, "row count does not match graph"));
    }
    Ok(Some(sigs))
}
