//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use bottrans_core::autodiff::{grad_check, Tape, Var};
use bottrans_core::csd::{build_topology, CsdMember, CsdTopology};
use bottrans_core::graphlets::{ego_signatures, NUM_ORBITS};
use bottrans_core::matrix::CsrMatrix;
use bottrans_core::nn::{classify, criticize, fuse, gat_cross_forward, gcn_forward, Bound, ModelParams, ParamId, Propagation};
use bottrans_core::synthgen::{generate_domain, DomainSpec};
use bottrans_core::train::{
    kernel_bandwidths, median_distance, tape_critic_gap, tape_gradient_penalty, tape_mmd2, tape_supervised_loss,
};
use bottrans_core::graph::sample_subbatch;
use bottrans_core::{Graph, Label, Matrix, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn er_graph(n: usize, p: f64, seed: u64) -> Graph {
    let mut r = rng(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if r.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let x = Matrix::from_fn(n, 3, |_, _| r.random_range(-1.0..1.0));
    Graph::from_edges(0, x, None, &edges).unwrap()
}

// ---------------------------------------------------------------- orbits

/// Graphlets on 2-4 nodes as edge lists over positions, with the orbit of
/// each position.
fn graphlet_catalog() -> Vec<(usize, Vec<(usize, usize)>, Vec<usize>)> {
    vec![
        (2, vec![(0, 1)], vec![0, 0]),
        (3, vec![(0, 1), (1, 2)], vec![1, 2, 1]),
        (3, vec![(0, 1), (1, 2), (0, 2)], vec![3, 3, 3]),
        (4, vec![(0, 1), (1, 2), (2, 3)], vec![4, 5, 5, 4]),
        (4, vec![(0, 1), (0, 2), (0, 3)], vec![7, 6, 6, 6]),
        (4, vec![(0, 1), (1, 2), (2, 3), (3, 0)], vec![8, 8, 8, 8]),
        // paw: triangle 0-1-2 with pendant 3 on 0
        (4, vec![(0, 1), (1, 2), (0, 2), (0, 3)], vec![11, 10, 10, 9]),
        // diamond: 4-cycle 0-1-2-3 plus chord 0-2
        (4, vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], vec![13, 12, 13, 12]),
        (4, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], vec![14; 4]),
    ]
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, k - 1);
            out.push(q);
        }
    }
    out
}

/// Orbit counts by trying every node subset of size 2..=4 and matching its
/// induced subgraph against the catalog under every position assignment.
pub fn orbit_oracle(g: &Graph) -> Vec<[u64; NUM_ORBITS]> {
    let n = g.num_nodes();
    let catalog = graphlet_catalog();
    let mut counts = vec![[0u64; NUM_ORBITS]; n];
    let mut subsets: Vec<Vec<usize>> = Vec::new();
    for mask in 1u32..(1 << n) {
        let k = mask.count_ones() as usize;
        if (2..=4).contains(&k) {
            subsets.push((0..n).filter(|&i| mask & (1 << i) != 0).collect());
        }
    }
    for nodes in subsets {
        let k = nodes.len();
        'shapes: for (size, edges, orbits) in &catalog {
            if *size != k {
                continue;
            }
            for perm in permutations(k) {
                // position i of the graphlet is played by nodes[perm[i]]
                let matches = (0..k).all(|a| {
                    (a + 1..k).all(|b| {
                        let want = edges.contains(&(a, b)) || edges.contains(&(b, a));
                        g.has_edge(nodes[perm[a]], nodes[perm[b]]) == want
                    })
                });
                if matches {
                    for (pos, &o) in orbits.iter().enumerate() {
                        counts[nodes[perm[pos]]][o] += 1;
                    }
                    break 'shapes;
                }
            }
        }
    }
    counts
}

/// Node set within `hops` of `center`, from all-pairs shortest paths.
pub fn ball_oracle(g: &Graph, center: usize, hops: usize) -> Vec<usize> {
    let n = g.num_nodes();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for u in 0..n {
        d[u][u] = 0;
        for &v in g.neighbors(u) {
            d[u][v] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    (0..n).filter(|&v| d[center][v] <= hops).collect()
}

// ---------------------------------------------------------------- metrics

pub fn confusion_oracle(labels: &[Label], scores: &[f64]) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (y, s) in labels.iter().zip(scores) {
        let pred_bot = *s >= 0.5;
        match (*y == Label::Bot, pred_bot) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    (tp, fp, tn, fn_)
}

pub fn f1_oracle(labels: &[Label], scores: &[f64]) -> f64 {
    let (tp, fp, _, fn_) = confusion_oracle(labels, scores);
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Fraction of (bot, human) pairs ranked correctly, ties counting half.
pub fn auc_oracle(labels: &[Label], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, yi) in labels.iter().enumerate() {
        for (j, yj) in labels.iter().enumerate() {
            if *yi == Label::Bot && *yj == Label::Human {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Random labels with both classes present and scores on a coarse grid so
/// that ties occur.
pub fn metric_instance(r: &mut ChaCha8Rng) -> (Vec<Label>, Vec<f64>) {
    let n = r.random_range(2..=20);
    let mut labels: Vec<Label> = (0..n)
        .map(|_| if r.random::<bool>() { Label::Bot } else { Label::Human })
        .collect();
    labels[0] = Label::Bot;
    labels[1] = Label::Human;
    let scores = (0..n).map(|_| r.random_range(0..=10) as f64 / 10.0).collect();
    (labels, scores)
}

// ---------------------------------------------------------------- gradients

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(lo..hi))
}

/// Entries with magnitude in [0.1, 1] and random sign.
pub fn away_from_zero(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let m = r.random_range(0.1..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Contracts an output with a fixed random matrix so every entry of its
/// gradient is exercised.
pub fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (rows, cols) = tape.shape(out);
    let w = random_matrix(&mut rng(seed), rows, cols, -1.0, 1.0);
    let w = tape.constant(w);
    let h = tape.hadamard(out, w)?;
    tape.reduce_sum(h)
}

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub loss: Loss,
    pub inputs: Vec<Matrix>,
}

/// One random instance of the named primitive.
pub fn primitive_case(name: &'static str, seed: u64) -> GradCase {
    let r = &mut rng(seed);
    let cs = seed.wrapping_mul(31).wrapping_add(7);
    let any = |r: &mut ChaCha8Rng, a: usize, b: usize| random_matrix(r, a, b, -1.0, 1.0);
    let (loss, inputs): (Loss, Vec<Matrix>) = match name {
        "matmul" => (
            Box::new(move |t, v| {
                let o = t.matmul(v[0], v[1])?;
                contract(t, o, cs)
            }),
            vec![any(r, 5, 4), any(r, 4, 3)],
        ),
        "spmm" => {
            let n = 6;
            let mut trip = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if r.random::<f64>() < 0.4 {
                        trip.push((i, j, r.random_range(-1.0..1.0)));
                    }
                }
            }
            let s = Arc::new(CsrMatrix::from_triplets(n, n, &trip).unwrap());
            (
                Box::new(move |t, v| {
                    let o = t.spmm(s.clone(), v[0])?;
                    contract(t, o, cs)
                }),
                vec![any(r, n, 3)],
            )
        }
        "add" | "sub" | "hadamard" => (
            Box::new(move |t, v| {
                let o = match name {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.hadamard(v[0], v[1])?,
                };
                contract(t, o, cs)
            }),
            vec![any(r, 3, 4), any(r, 3, 4)],
        ),
        "add_row" => (
            Box::new(move |t, v| {
                let o = t.add_row(v[0], v[1])?;
                contract(t, o, cs)
            }),
            vec![any(r, 3, 4), any(r, 1, 4)],
        ),
        "scale" => (
            Box::new(move |t, v| {
                let o = t.scale(v[0], -1.7)?;
                contract(t, o, cs)
            }),
            vec![any(r, 3, 4)],
        ),
        "relu" | "leaky_relu" | "abs" => (
            Box::new(move |t, v| {
                let o = match name {
                    "relu" => t.relu(v[0])?,
                    "leaky_relu" => t.leaky_relu(v[0], 0.2)?,
                    _ => t.abs(v[0])?,
                };
                contract(t, o, cs)
            }),
            vec![away_from_zero(r, 4, 3)],
        ),
        "exp" | "sigmoid" => (
            Box::new(move |t, v| {
                let o = if name == "exp" { t.exp(v[0])? } else { t.sigmoid(v[0])? };
                contract(t, o, cs)
            }),
            vec![any(r, 4, 3)],
        ),
        "log" => (
            Box::new(move |t, v| {
                let o = t.log(v[0])?;
                contract(t, o, cs)
            }),
            vec![random_matrix(r, 4, 3, 0.5, 2.0)],
        ),
        "row_softmax" | "row_log_softmax" => (
            Box::new(move |t, v| {
                let o = if name == "row_softmax" {
                    t.row_softmax(v[0])?
                } else {
                    t.row_log_softmax(v[0])?
                };
                contract(t, o, cs)
            }),
            vec![random_matrix(r, 4, 3, -2.0, 2.0)],
        ),
        "concat_rows" => (
            Box::new(move |t, v| {
                let o = t.concat_rows(v[0], v[1])?;
                contract(t, o, cs)
            }),
            vec![any(r, 3, 4), any(r, 2, 4)],
        ),
        "concat_cols" => (
            Box::new(move |t, v| {
                let o = t.concat_cols(v[0], v[1])?;
                contract(t, o, cs)
            }),
            vec![any(r, 3, 4), any(r, 3, 2)],
        ),
        "reduce_mean" | "reduce_sum" => (
            Box::new(move |t, v| {
                let sq = t.hadamard(v[0], v[0])?;
                if name == "reduce_mean" {
                    t.reduce_mean(sq)
                } else {
                    t.reduce_sum(sq)
                }
            }),
            vec![any(r, 3, 4)],
        ),
        "gather_rows" => (
            Box::new(move |t, v| {
                let o = t.gather_rows(v[0], vec![2, 0, 2, 1])?;
                contract(t, o, cs)
            }),
            vec![any(r, 3, 4)],
        ),
        "scale_rows" => (
            Box::new(move |t, v| {
                let o = t.scale_rows(v[0], v[1])?;
                contract(t, o, cs)
            }),
            vec![any(r, 4, 3), any(r, 4, 1)],
        ),
        "column" => (
            Box::new(move |t, v| {
                let o = t.column(v[0], 1)?;
                contract(t, o, cs)
            }),
            vec![any(r, 4, 3)],
        ),
        "segment_softmax" => (
            Box::new(move |t, v| {
                let o = t.segment_softmax(v[0], Arc::new(vec![0, 2, 3, 7]))?;
                contract(t, o, cs)
            }),
            vec![random_matrix(r, 7, 1, -2.0, 2.0)],
        ),
        "scatter_add_rows" => (
            Box::new(move |t, v| {
                let o = t.scatter_add_rows(v[0], Arc::new(vec![0, 2, 0, 1, 2, 2]), 3)?;
                contract(t, o, cs)
            }),
            vec![any(r, 6, 2)],
        ),
        "pairwise_sq_dist" => (
            Box::new(move |t, v| {
                let o = t.pairwise_sq_dist(v[0], v[1])?;
                contract(t, o, cs)
            }),
            vec![any(r, 3, 2), any(r, 4, 2)],
        ),
        "sum_all" => (
            Box::new(move |t, v| {
                let s = t.sum_all(&[v[0], v[1], v[0]])?;
                contract(t, s, cs)
            }),
            vec![any(r, 2, 3), any(r, 2, 3)],
        ),
        other => panic!("unknown primitive {other}"),
    };
    GradCase { name, loss, inputs }
}

pub const PRIMITIVES: [&str; 26] = [
    "matmul",
    "spmm",
    "add",
    "sub",
    "hadamard",
    "add_row",
    "scale",
    "relu",
    "leaky_relu",
    "abs",
    "exp",
    "sigmoid",
    "log",
    "row_softmax",
    "row_log_softmax",
    "concat_rows",
    "concat_cols",
    "reduce_mean",
    "reduce_sum",
    "gather_rows",
    "scale_rows",
    "column",
    "segment_softmax",
    "scatter_add_rows",
    "pairwise_sq_dist",
    "sum_all",
];

/// Small two-source problem with fixed batches, topology and kernel
/// bandwidths; only the parameters vary.
pub struct Composite {
    pub sources: Vec<(Propagation, Matrix, Vec<Label>)>,
    pub target: (Propagation, Matrix),
    pub topology: CsdTopology,
    pub sigmas: Vec<f64>,
    pub row_weights: Vec<f64>,
    pub params: ModelParams,
}

pub const COMPOSITE_HIDDEN: usize = 4;

fn small_spec(shift: f64) -> DomainSpec {
    DomainSpec {
        num_nodes: 12,
        feature_dim: 3,
        mean_degree: 3.0,
        class_center_shift: vec![shift, 0.0, 0.0],
        ..DomainSpec::default()
    }
}

impl Composite {
    pub fn new(seed: u64) -> Composite {
        let graphs: Vec<Graph> = (0..3)
            .map(|d| generate_domain(&small_spec(d as f64 * 0.5), seed * 10 + d).unwrap())
            .collect();
        let params = ModelParams::init(3, COMPOSITE_HIDDEN, seed);
        let batches: Vec<_> = graphs
            .iter()
            .enumerate()
            .map(|(d, g)| sample_subbatch(g, 5, seed * 7 + d as u64).unwrap())
            .collect();
        let mut sources = Vec::new();
        let mut members = Vec::new();
        let mut row_weights = Vec::new();
        let mut sigs = Vec::new();
        for (k, b) in batches[..2].iter().enumerate() {
            let labels = graphs[k].labels().unwrap();
            let all_sigs = ego_signatures(&graphs[k]);
            for &c in &b.centers {
                members.push(CsdMember { domain: k, node: c });
                sigs.push(all_sigs[c].clone());
                row_weights.push((0.6 + 0.3 * k as f64) / b.num_centers() as f64);
            }
            sources.push((
                Propagation::for_subbatch(b).unwrap(),
                b.subgraph.features().clone(),
                b.centers.iter().map(|&c| labels[c]).collect(),
            ));
        }
        let target = (
            Propagation::for_subbatch(&batches[2]).unwrap(),
            batches[2].subgraph.features().clone(),
        );
        let mut c = Composite {
            sources,
            target,
            topology: CsdTopology::from_edges(Vec::new(), Vec::new()),
            sigmas: Vec::new(),
            row_weights,
            params,
        };
        // topology and bandwidths from the initial embeddings, then frozen
        let mut tape = Tape::new();
        let p = c.params.bind(&mut tape, &[]);
        let zs: Vec<Matrix> = c
            .sources
            .iter()
            .map(|(prop, x, _)| {
                let x = tape.constant(x.clone());
                let z = gcn_forward(&mut tape, &p, prop, x).unwrap();
                tape.value(z).clone()
            })
            .collect();
        let stacked = Matrix::from_rows(
            &zs.iter()
                .flat_map(|z| (0..z.rows()).map(|i| z.row(i).to_vec()))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let sig_refs: Vec<_> = sigs.iter().collect();
        c.topology = build_topology(&stacked, members, 2, Some(&sig_refs)).unwrap();
        let refs: Vec<&Matrix> = zs.iter().collect();
        c.sigmas = kernel_bandwidths(&[0.5, 1.0, 2.0], median_distance(&refs));
        c
    }

    pub fn inputs(&self) -> Vec<Matrix> {
        ParamId::ALL.iter().map(|&id| self.params.get(id).clone()).collect()
    }

    /// `L_sup + Reg_p + L_d + gradient penalty` with all parameters free.
    pub fn loss(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let p = Bound::from_vars(vars.to_vec())?;
        let mut z = None;
        let mut labels = Vec::new();
        let mut ranges = Vec::new();
        for (prop, x, l) in &self.sources {
            let x = tape.constant(x.clone());
            let zk = gcn_forward(tape, &p, prop, x)?;
            let start = labels.len();
            labels.extend_from_slice(l);
            ranges.push((start..labels.len()).collect::<Vec<_>>());
            z = Some(match z {
                None => zk,
                Some(acc) => tape.concat_rows(acc, zk)?,
            });
        }
        let zs = z.expect("sources");
        let xt = tape.constant(self.target.1.clone());
        let zt = gcn_forward(tape, &p, &self.target.0, xt)?;
        let gat = gat_cross_forward(tape, &p, &self.topology, zs)?;
        let (zf, _) = fuse(tape, &p, zs, gat.embeddings)?;
        let logits = classify(tape, &p, zf)?;
        let l_sup = tape_supervised_loss(tape, logits, &labels, &self.row_weights)?;
        let ds = criticize(tape, &p, zf)?;
        let dt = criticize(tape, &p, zt)?;
        let l_d = tape_critic_gap(tape, ds, dt, &self.row_weights)?;
        let a = tape.gather_rows(gat.embeddings, ranges[0].clone())?;
        let b = tape.gather_rows(gat.embeddings, ranges[1].clone())?;
        let mmd = tape_mmd2(tape, a, b, &self.sigmas)?;
        let reg = tape.scale(mmd, 2.0)?;
        let gp = tape_gradient_penalty(tape, p.var(ParamId::CriticW), 10.0)?;
        tape.sum_all(&[l_sup, reg, l_d, gp])
    }
}

/// Runs a finite-difference check on `loss` at `inputs` if every kink is
/// farther than 100 steps away; returns `None` otherwise.
pub fn checked(loss: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Matrix]) -> Option<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    loss(&mut tape, &vars).unwrap();
    if tape.kink_margin() < 100.0 * FD_STEP {
        return None;
    }
    Some(grad_check(loss, inputs, FD_STEP).unwrap())
}

/// Worst error over `instances` accepted draws of each primitive.
pub fn primitive_errors(instances: usize) -> Vec<(&'static str, f64, usize)> {
    PRIMITIVES
        .iter()
        .map(|&name| {
            let mut worst = 0.0f64;
            let mut done = 0;
            let mut seed = 0;
            while done < instances {
                let case = primitive_case(name, seed);
                seed += 1;
                if let Some(e) = checked(&*case.loss, &case.inputs) {
                    worst = worst.max(e);
                    done += 1;
                }
            }
            (name, worst, done)
        })
        .collect()
}

/// Worst error of the composed loss over `instances` accepted draws, with
/// the number of draws skipped for lying too close to a kink.
pub fn composite_errors(instances: usize) -> (f64, usize, usize) {
    let mut worst = 0.0f64;
    let (mut done, mut skipped, mut seed) = (0, 0, 1);
    while done < instances {
        let c = Composite::new(seed);
        seed += 1;
        let loss = |t: &mut Tape, v: &[Var]| c.loss(t, v);
        match checked(&loss, &c.inputs()) {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => skipped += 1,
        }
    }
    (worst, done, skipped)
}
