//! Network components: in-domain GCN encoder, cross-domain attention
//! encoder with edge features, channel fusion, classifier and critic.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var, LEAKY_RELU_SLOPE};
use crate::csd::CsdTopology;
use crate::error::{Error, Result};
use crate::graph::{Graph, Subbatch};
use crate::matrix::{CsrMatrix, Matrix};

pub const DEFAULT_HIDDEN: usize = 64;
const CHECKPOINT_MAGIC: &str = "bottrans-checkpoint 1";

/// Parameter groups, optimized separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// In-domain encoder f.
    Encoder,
    /// Cross-domain encoder f_a and the fusion matrix.
    Other,
    /// Classifier g.
    Classifier,
    /// Domain critic d.
    Critic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    GcnW0,
    GcnB0,
    GcnW1,
    GcnB1,
    GatW,
    GatB,
    GatASelf,
    GatANeighbor,
    GatAEdge,
    GatWEdge,
    FuseW,
    ClsW0,
    ClsB0,
    ClsW1,
    ClsB1,
    CriticW,
    CriticB,
}

impl ParamId {
    pub const ALL: [ParamId; 17] = [
        ParamId::GcnW0,
        ParamId::GcnB0,
        ParamId::GcnW1,
        ParamId::GcnB1,
        ParamId::GatW,
        ParamId::GatB,
        ParamId::GatASelf,
        ParamId::GatANeighbor,
        ParamId::GatAEdge,
        ParamId::GatWEdge,
        ParamId::FuseW,
        ParamId::ClsW0,
        ParamId::ClsB0,
        ParamId::ClsW1,
        ParamId::ClsB1,
        ParamId::CriticW,
        ParamId::CriticB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::GcnW0 => "gcn.w0",
            ParamId::GcnB0 => "gcn.b0",
            ParamId::GcnW1 => "gcn.w1",
            ParamId::GcnB1 => "gcn.b1",
            ParamId::GatW => "gat.w",
            ParamId::GatB => "gat.b",
            ParamId::GatASelf => "gat.a_self",
            ParamId::GatANeighbor => "gat.a_neighbor",
            ParamId::GatAEdge => "gat.a_edge",
            ParamId::GatWEdge => "gat.w_edge",
            ParamId::FuseW => "fuse.w",
            ParamId::ClsW0 => "cls.w0",
            ParamId::ClsB0 => "cls.b0",
            ParamId::ClsW1 => "cls.w1",
            ParamId::ClsB1 => "cls.b1",
            ParamId::CriticW => "critic.w",
            ParamId::CriticB => "critic.b",
        }
    }

    pub fn group(self) -> Group {
        use ParamId::*;
        match self {
            GcnW0 | GcnB0 | GcnW1 | GcnB1 => Group::Encoder,
            GatW | GatB | GatASelf | GatANeighbor | GatAEdge | GatWEdge | FuseW => Group::Other,
            ClsW0 | ClsB0 | ClsW1 | ClsB1 => Group::Classifier,
            CriticW | CriticB => Group::Critic,
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }

    pub fn shape(self, dim: usize, hidden: usize) -> (usize, usize) {
        use ParamId::*;
        match self {
            GcnW0 => (dim, hidden),
            GcnW1 | GatW | ClsW0 => (hidden, hidden),
            GcnB0 | GcnB1 | GatB | ClsB0 | GatWEdge => (1, hidden),
            GatASelf | GatANeighbor | GatAEdge | CriticW => (hidden, 1),
            FuseW => (2 * hidden, 2),
            ClsW1 => (hidden, 2),
            ClsB1 => (1, 2),
            CriticB => (1, 1),
        }
    }
}

/// All trainable matrices of the model, stored in [`ParamId::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    feature_dim: usize,
    hidden: usize,
    values: Vec<Matrix>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(feature_dim: usize, hidden: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = ParamId::ALL
            .iter()
            .map(|&id| {
                let (r, c) = id.shape(feature_dim, hidden);
                let is_bias = r == 1 && id != ParamId::GatWEdge;
                if is_bias {
                    Matrix::zeros(r, c)
                } else {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    Matrix::from_fn(r, c, |_, _| rng.random_range(-limit..limit))
                }
            })
            .collect();
        ModelParams {
            feature_dim,
            hidden,
            values,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.index()]
    }

    pub fn set(&mut self, id: ParamId, m: Matrix) -> Result<()> {
        if m.shape() != self.get(id).shape() {
            return Err(Error::Shape {
                op: "set_param",
                detail: format!("{}: {:?} vs {:?}", id.name(), m.shape(), self.get(id).shape()),
            });
        }
        self.values[id.index()] = m;
        Ok(())
    }

    /// Records every parameter on the tape; those in `trainable` groups are
    /// differentiable, the rest are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> Bound {
        let vars = ParamId::ALL
            .iter()
            .map(|&id| {
                let m = self.get(id).clone();
                if trainable.contains(&id.group()) {
                    tape.param(m)
                } else {
                    tape.constant(m)
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CHECKPOINT_MAGIC}\ndims {} {}\n", self.feature_dim, self.hidden);
        for &id in &ParamId::ALL {
            let m = self.get(id);
            let _ = writeln!(s, "param {} {} {}", id.name(), m.rows(), m.cols());
            let vals: Vec<String> = m.as_slice().iter().map(f64::to_string).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<ModelParams> {
        let bad = |line: usize, reason: String| Error::Parse {
            path: "checkpoint".into(),
            line,
            reason,
        };
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(1, "not a checkpoint (bad magic line)".into()));
        }
        let dims: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("dims "))
            .map(|l| l.split_whitespace().filter_map(|t| t.parse().ok()).collect())
            .unwrap_or_default();
        let [feature_dim, hidden] = dims[..] else {
            return Err(bad(2, "expected `dims <d> <h>`".into()));
        };
        let mut params = ModelParams {
            feature_dim,
            hidden,
            values: Vec::with_capacity(ParamId::ALL.len()),
        };
        for (k, &id) in ParamId::ALL.iter().enumerate() {
            let ln = 3 + 2 * k;
            let header = lines.next().ok_or_else(|| bad(ln, format!("missing {}", id.name())))?;
            let want = id.shape(feature_dim, hidden);
            if header != format!("param {} {} {}", id.name(), want.0, want.1) {
                return Err(bad(ln, format!("expected parameter {} with shape {want:?}", id.name())));
            }
            let vals: Vec<f64> = lines
                .next()
                .unwrap_or_default()
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(ln + 1, e.to_string()))?;
            params.values.push(Matrix::from_vec(want.0, want.1, vals)?);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::missing("checkpoint", path))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        ModelParams::parse(&text)
    }
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally recorded variables, one per entry of
    /// [`ParamId::ALL`] in that order.
    pub fn from_vars(vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != ParamId::ALL.len() {
            return Err(Error::input(format!("{} variables for {} parameters", vars.len(), ParamId::ALL.len())));
        }
        Ok(Bound { vars })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.index()] = var;
    }
}

/// Normalized propagation matrices for the two GCN layers.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub layer1: Arc<CsrMatrix>,
    pub layer2: Arc<CsrMatrix>,
}

fn normalized_rows(rows: usize, cols: usize, degrees: &[usize], neighbors: impl Fn(usize) -> Vec<usize>) -> Result<CsrMatrix> {
    let mut trip = Vec::new();
    for i in 0..rows {
        let di = degrees[i] as f64 + 1.0;
        trip.push((i, i, 1.0 / di));
        for j in neighbors(i) {
            if j < cols {
                let dj = degrees[j] as f64 + 1.0;
                trip.push((i, j, 1.0 / (di * dj).sqrt()));
            }
        }
    }
    CsrMatrix::from_triplets(rows, cols, &trip)
}

impl Propagation {
    /// Full-graph propagation: both layers use the renormalized adjacency
    /// with self-loops.
    pub fn full(graph: &Graph) -> Result<Propagation> {
        let n = graph.num_nodes();
        let deg: Vec<usize> = (0..n).map(|v| graph.neighbors(v).len()).collect();
        let a = Arc::new(normalized_rows(n, n, &deg, |i| graph.neighbors(i).to_vec())?);
        Ok(Propagation {
            layer1: a.clone(),
            layer2: a,
        })
    }

    /// Layer 1 maps the 2-hop closure onto the 1-hop closure, layer 2 maps
    /// the 1-hop closure onto the centers. Normalization uses parent-graph
    /// degrees, so center rows equal their full-graph embeddings.
    pub fn for_subbatch(batch: &Subbatch) -> Result<Propagation> {
        let n = batch.nodes.len();
        let sub = &batch.subgraph;
        let layer1 = normalized_rows(batch.hop1_len, n, &batch.parent_degrees, |i| sub.neighbors(i).to_vec())?;
        let layer2 = normalized_rows(batch.num_centers(), batch.hop1_len, &batch.parent_degrees, |i| {
            sub.neighbors(i).to_vec()
        })?;
        Ok(Propagation {
            layer1: Arc::new(layer1),
            layer2: Arc::new(layer2),
        })
    }
}

/// Two-layer GCN: ReLU after the first layer, identity after the second.
pub fn gcn_forward(tape: &mut Tape, p: &Bound, prop: &Propagation, x: Var) -> Result<Var> {
    let ax = tape.spmm(prop.layer1.clone(), x)?;
    let h = tape.matmul(ax, p.var(ParamId::GcnW0))?;
    let h = tape.add_row(h, p.var(ParamId::GcnB0))?;
    let h = tape.relu(h)?;
    let ah = tape.spmm(prop.layer2.clone(), h)?;
    let z = tape.matmul(ah, p.var(ParamId::GcnW1))?;
    tape.add_row(z, p.var(ParamId::GcnB1))
}

/// In-domain embeddings of every node of `graph`.
pub fn embed_graph(params: &ModelParams, graph: &Graph) -> Result<Matrix> {
    if graph.feature_dim() != params.feature_dim() {
        return Err(Error::Shape {
            op: "embed_graph",
            detail: format!("features {} vs model {}", graph.feature_dim(), params.feature_dim()),
        });
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, &[]);
    let x = tape.constant(graph.features().clone());
    let z = gcn_forward(&mut tape, &p, &Propagation::full(graph)?, x)?;
    Ok(tape.value(z).clone())
}

/// Output of the cross-domain encoder.
#[derive(Debug, Clone, Copy)]
pub struct GatOutput {
    pub embeddings: Var,
    /// Attention weights, one per (node, neighbor) pair with the self entry
    /// first in every segment.
    pub attention: Var,
}

/// One attention layer over the cross-domain topology. Every node attends
/// to itself (edge feature 1) and to its cross-domain neighbors.
pub fn gat_cross_forward(tape: &mut Tape, p: &Bound, topo: &CsdTopology, z: Var) -> Result<GatOutput> {
    let n = tape.shape(z).0;
    if topo.num_members() != n {
        return Err(Error::Shape {
            op: "gat_cross_forward",
            detail: format!("{} topology members vs {n} embedding rows", topo.num_members()),
        });
    }
    let mut offsets = vec![0usize];
    let mut dst = Vec::with_capacity(n + topo.num_edges());
    let mut src = Vec::with_capacity(n + topo.num_edges());
    let mut weight = Vec::with_capacity(n + topo.num_edges());
    for i in 0..n {
        dst.push(i);
        src.push(i);
        weight.push(1.0);
        for e in topo.out_edges(i) {
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::input(format!("edge weight {} outside [0,1]", e.weight)));
            }
            dst.push(i);
            src.push(e.neighbor);
            weight.push(e.weight);
        }
        offsets.push(dst.len());
    }
    let hw = tape.matmul(z, p.var(ParamId::GatW))?;
    let self_part = tape.matmul(hw, p.var(ParamId::GatASelf))?;
    let nbr_part = tape.matmul(hw, p.var(ParamId::GatANeighbor))?;
    let self_part = tape.gather_rows(self_part, dst.clone())?;
    let nbr_part = tape.gather_rows(nbr_part, src.clone())?;
    let e = tape.constant(Matrix::from_vec(weight.len(), 1, weight)?);
    let ew = tape.matmul(e, p.var(ParamId::GatWEdge))?;
    let edge_part = tape.matmul(ew, p.var(ParamId::GatAEdge))?;
    let s = tape.add(self_part, nbr_part)?;
    let s = tape.add(s, edge_part)?;
    let s = tape.leaky_relu(s, LEAKY_RELU_SLOPE)?;
    let alpha = tape.segment_softmax(s, Arc::new(offsets))?;
    let msgs = tape.gather_rows(hw, src)?;
    let msgs = tape.scale_rows(msgs, alpha)?;
    let agg = tape.scatter_add_rows(msgs, Arc::new(dst), n)?;
    let out = tape.add_row(agg, p.var(ParamId::GatB))?;
    let out = tape.leaky_relu(out, LEAKY_RELU_SLOPE)?;
    Ok(GatOutput {
        embeddings: out,
        attention: alpha,
    })
}

/// Softmax-gated mix of the two channels. Returns `(z, beta)` with `beta`
/// an n x 2 matrix of mixing weights.
pub fn fuse(tape: &mut Tape, p: &Bound, z_in: Var, z_cross: Var) -> Result<(Var, Var)> {
    let cat = tape.concat_cols(z_in, z_cross)?;
    let logits = tape.matmul(cat, p.var(ParamId::FuseW))?;
    let beta = tape.row_softmax(logits)?;
    let b1 = tape.column(beta, 0)?;
    let b2 = tape.column(beta, 1)?;
    let a = tape.scale_rows(z_in, b1)?;
    let b = tape.scale_rows(z_cross, b2)?;
    Ok((tape.add(a, b)?, beta))
}

/// Two-layer perceptron producing 2-class logits.
pub fn classify(tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
    let h = tape.matmul(z, p.var(ParamId::ClsW0))?;
    let h = tape.add_row(h, p.var(ParamId::ClsB0))?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, p.var(ParamId::ClsW1))?;
    tape.add_row(o, p.var(ParamId::ClsB1))
}

/// Affine critic, one real output per row.
pub fn criticize(tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
    let o = tape.matmul(z, p.var(ParamId::CriticW))?;
    tape.add_row(o, p.var(ParamId::CriticB))
}

/// Bot-class probability per row of an embedding matrix.
pub fn bot_probabilities(params: &ModelParams, z: &Matrix) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, &[]);
    let zv = tape.constant(z.clone());
    let logits = classify(&mut tape, &p, zv)?;
    let probs = tape.row_softmax(logits)?;
    let m = tape.value(probs);
    Ok((0..m.rows()).map(|i| m.get(i, 1)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csd::{CsdMember, CsdTopology};

    fn params(dim: usize, hidden: usize) -> ModelParams {
        ModelParams::init(dim, hidden, 7)
    }

    #[test]
    fn isolated_node_gcn_is_affine_in_features() {
        let mut p = params(3, 4);
        p.set(ParamId::GcnW1, Matrix::from_fn(4, 4, |i, j| f64::from(i == j))).unwrap();
        let g = Graph::from_edges(0, Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap(), None, &[]).unwrap();
        let z = embed_graph(&p, &g).unwrap();
        let x = g.features();
        let mut want = x.matmul(p.get(ParamId::GcnW0)).unwrap();
        want.add_assign(p.get(ParamId::GcnB0));
        let want = want.map(|v| v.max(0.0));
        for j in 0..4 {
            assert!((z.get(0, j) - want.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn connected_twins_get_identical_embeddings() {
        let g = Graph::from_edges(0, Matrix::filled(2, 3, 0.7), None, &[(0, 1)]).unwrap();
        let z = embed_graph(&params(3, 5), &g).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn gat_singleton_and_uniform_attention() {
        let p = params(2, 3);
        let mut tape = Tape::new();
        let mut b = p.bind(&mut tape, &[]);
        let z = tape.constant(Matrix::from_fn(3, 3, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.2));
        let members = vec![
            CsdMember { domain: 0, node: 0 },
            CsdMember { domain: 1, node: 0 },
            CsdMember { domain: 2, node: 0 },
        ];
        // no edges: singleton softmax
        let empty = CsdTopology::from_edges(members.clone(), vec![vec![], vec![], vec![]]);
        let out = gat_cross_forward(&mut tape, &b, &empty, z).unwrap();
        assert!(tape.value(out.attention).as_slice().iter().all(|&a| a == 1.0));
        let zw = tape.value(z).matmul(p.get(ParamId::GatW)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let pre = zw.get(i, j) + p.get(ParamId::GatB).get(0, j);
                let want = if pre > 0.0 { pre } else { LEAKY_RELU_SLOPE * pre };
                assert!((tape.value(out.embeddings).get(i, j) - want).abs() < 1e-12);
            }
        }
        // zero attention vectors: uniform over self plus two neighbors
        for id in [ParamId::GatASelf, ParamId::GatANeighbor, ParamId::GatAEdge] {
            b.vars[id.index()] = tape.constant(Matrix::zeros(3, 1));
        }
        let topo = CsdTopology::from_edges(members, vec![vec![(1, 0.5), (2, 0.9)], vec![], vec![]]);
        let out = gat_cross_forward(&mut tape, &b, &topo, z).unwrap();
        let a = tape.value(out.attention).as_slice().to_vec();
        for x in &a[..3] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gat_rejects_out_of_range_weights() {
        let p = params(2, 3);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &[]);
        let z = tape.constant(Matrix::zeros(2, 3));
        let members = vec![CsdMember { domain: 0, node: 0 }, CsdMember { domain: 1, node: 0 }];
        let topo = CsdTopology::from_edges(members, vec![vec![(1, 1.5)], vec![]]);
        assert!(matches!(gat_cross_forward(&mut tape, &b, &topo, z), Err(Error::Input(_))));
    }

    #[test]
    fn fuse_cases() {
        let mut p = params(2, 3);
        p.set(ParamId::FuseW, Matrix::zeros(6, 2)).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &[]);
        let zi = tape.constant(Matrix::from_fn(2, 3, |i, j| i as f64 + j as f64));
        let zc = tape.constant(Matrix::from_fn(2, 3, |i, j| 2.0 * j as f64 - i as f64));
        let (z, beta) = fuse(&mut tape, &b, zi, zc).unwrap();
        assert!(tape.value(beta).as_slice().iter().all(|&x| x == 0.5));
        let want = tape.value(zi).zip_map(tape.value(zc), |a, b| (a + b) / 2.0);
        assert!(tape.value(z).zip_map(&want, |a, b| (a - b).abs()).max_abs() < 1e-15);

        let p = params(2, 3);
        let b = p.bind(&mut tape, &[]);
        let (z, beta) = fuse(&mut tape, &b, zi, zi).unwrap();
        assert!(tape.value(z).zip_map(tape.value(zi), |a, b| (a - b).abs()).max_abs() < 1e-12);
        for i in 0..2 {
            let s: f64 = tape.value(beta).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_and_critic() {
        let mut p = params(2, 3);
        for id in [ParamId::ClsW0, ParamId::ClsB0, ParamId::ClsW1, ParamId::ClsB1, ParamId::CriticW, ParamId::CriticB] {
            let (r, c) = p.get(id).shape();
            p.set(id, Matrix::zeros(r, c)).unwrap();
        }
        let z = Matrix::from_fn(4, 3, |i, j| i as f64 - j as f64);
        assert!(bot_probabilities(&p, &z).unwrap().iter().all(|&x| x == 0.5));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &[]);
        let zv = tape.constant(z);
        let d = criticize(&mut tape, &b, zv).unwrap();
        assert!(tape.value(d).as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = params(4, 6);
        let back = ModelParams::parse(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_text(), p.to_text());
        assert!(ModelParams::parse("nope").is_err());
        let missing = ModelParams::load(Path::new("/definitely/not/here.ckpt"));
        assert!(missing.unwrap_err().to_string().starts_with("checkpoint not found"));
    }
}
