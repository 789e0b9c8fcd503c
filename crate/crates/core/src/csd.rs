//! Cross-source-domain topology: every source node in a batch is linked to
//! its Top-K most similar nodes from the other source domains, and each
//! link carries a graphlet-kernel weight.

use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::Label;
use crate::graphlets::{edge_score, EgoSignature};
use crate::matrix::{dot, norm, Matrix};

/// A batch node: its source domain and its id in that domain's graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CsdMember {
    pub domain: usize,
    pub node: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsdEdge {
    /// Member index of the neighbor.
    pub neighbor: usize,
    pub weight: f64,
}

/// Directed cross-domain edges, grouped by the receiving member.
#[derive(Debug, Clone, PartialEq)]
pub struct CsdTopology {
    members: Vec<CsdMember>,
    out: Vec<Vec<CsdEdge>>,
}

impl CsdTopology {
    pub fn from_edges(members: Vec<CsdMember>, edges: Vec<Vec<(usize, f64)>>) -> CsdTopology {
        assert_eq!(members.len(), edges.len());
        let out = edges
            .into_iter()
            .map(|es| es.into_iter().map(|(neighbor, weight)| CsdEdge { neighbor, weight }).collect())
            .collect();
        CsdTopology { members, out }
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[CsdMember] {
        &self.members
    }

    pub fn num_edges(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    /// Neighbors of member `i`, most similar first.
    pub fn out_edges(&self, i: usize) -> &[CsdEdge] {
        &self.out[i]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, CsdEdge)> + '_ {
        self.out.iter().enumerate().flat_map(|(i, es)| es.iter().map(move |e| (i, *e)))
    }

    /// Fraction of edges whose endpoints share a label; `label(member)`
    /// supplies labels. `None` without edges.
    pub fn label_homophily(&self, label: impl Fn(&CsdMember) -> Label) -> Option<f64> {
        let (same, total) = self.edges().fold((0usize, 0usize), |(s, t), (i, e)| {
            let same = label(&self.members[i]) == label(&self.members[e.neighbor]);
            (s + usize::from(same), t + 1)
        });
        (total > 0).then(|| same as f64 / total as f64)
    }

    /// Writes one `p:i q:j e_ij` line per edge.
    pub fn write_trace(&self, w: &mut dyn Write) -> std::io::Result<()> {
        for (i, e) in self.edges() {
            let a = self.members[i];
            let b = self.members[e.neighbor];
            writeln!(w, "{}:{} {}:{} {}", a.domain, a.node, b.domain, b.node, e.weight)?;
        }
        Ok(())
    }
}

/// Builds the Top-K topology from batch embeddings (one row per member).
///
/// Candidates for a member are all batch members of other domains, ranked
/// by cosine similarity with ties broken by lower domain id, then lower node
/// id. Edge weights come from `signatures` (aligned with `members`), or are
/// all 1 when `None`.
pub fn build_topology(
    embeddings: &Matrix,
    members: Vec<CsdMember>,
    k: usize,
    signatures: Option<&[&EgoSignature]>,
) -> Result<CsdTopology> {
    let n = members.len();
    if k == 0 {
        return Err(Error::input("top-k needs k >= 1"));
    }
    if embeddings.rows() != n {
        return Err(Error::input(format!("{} embedding rows for {n} members", embeddings.rows())));
    }
    if let Some(s) = signatures {
        if s.len() != n {
            return Err(Error::input(format!("{} signatures for {n} members", s.len())));
        }
    }
    let first = members.first().map(|m| m.domain);
    if members.iter().all(|m| Some(m.domain) == first) {
        log::debug!("single-domain batch: cross-domain topology is empty");
        return Ok(CsdTopology::from_edges(members, vec![Vec::new(); n]));
    }

    let norms: Vec<f64> = (0..n).map(|i| norm(embeddings.row(i))).collect();
    let cos = |i: usize, j: usize| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            dot(embeddings.row(i), embeddings.row(j)) / (norms[i] * norms[j])
        }
    };

    let mut out = Vec::with_capacity(n);
    let mut candidates: Vec<(f64, CsdMember, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        candidates.extend(
            (0..n)
                .filter(|&j| members[j].domain != members[i].domain)
                .map(|j| (cos(i, j), members[j], j)),
        );
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let edges = candidates
            .iter()
            .take(k)
            .map(|&(_, _, j)| {
                let weight = signatures.map_or(1.0, |s| edge_score(s[i], s[j]));
                (j, weight)
            })
            .collect();
        out.push(edges);
    }
    Ok(CsdTopology::from_edges(members, out))
}
