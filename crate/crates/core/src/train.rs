//! Selective multi-source adversarial training.
//!
//! Each step draws one mini-batch per source and one from the target,
//! encodes them with the shared GCN, links source nodes across domains and
//! runs the cross-domain attention channel. A Wasserstein critic is trained
//! for a few ascent steps on the detached embeddings, then the encoders and
//! classifier take one descent step on the weighted supervised loss, the
//! pairwise source alignment term and the weighted critic gap.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::csd::{build_topology, CsdMember, CsdTopology};
use crate::domain::DomainSet;
use crate::error::{Error, Result};
use crate::graph::{sample_subbatch, Label, Subbatch};
use crate::graphlets::{count_orbits, ego_signatures, histogram_similarity, EgoSignature, GdvTable};
use crate::matrix::Matrix;
use crate::nn::{classify, criticize, fuse, gat_cross_forward, gcn_forward, Bound, Group, ModelParams, ParamId, Propagation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsdMode {
    /// No cross-domain channel.
    Off,
    /// Cross-domain channel with every edge feature set to 1.
    Unweighted,
    /// Cross-domain channel with graphlet-kernel edge features.
    Weighted,
}

/// How the critic is kept (approximately) 1-Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lipschitz {
    GradientPenalty,
    Clip,
}

/// What the Top-K neighbor search compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologySource {
    /// Current in-domain embeddings of the batch.
    Embeddings,
    /// Raw node features of the batch; fixed over training.
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub top_k: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub critic_steps: usize,
    pub seed: u64,
    /// Kernel bandwidths as multiples of the median pairwise distance.
    pub mmd_bandwidths: Vec<f64>,
    pub hidden: usize,
    pub lipschitz: Lipschitz,
    pub gradient_penalty: f64,
    pub clip: f64,
    /// Epochs between refreshes of the semantic weights.
    pub weight_refresh: usize,
    pub topology_source: TopologySource,
    pub csd: CsdMode,
    /// Weight each source by its relevance; uniform weights otherwise.
    pub selective: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            top_k: 5,
            gamma: 0.5,
            lambda: 0.5,
            eta1: 1.0,
            eta2: 1.0,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            epochs: 30,
            critic_steps: 5,
            seed: 0,
            mmd_bandwidths: vec![0.5, 1.0, 2.0],
            hidden: crate::nn::DEFAULT_HIDDEN,
            lipschitz: Lipschitz::GradientPenalty,
            gradient_penalty: 10.0,
            clip: 0.01,
            weight_refresh: 1,
            topology_source: TopologySource::Embeddings,
            csd: CsdMode::Weighted,
            selective: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("train.{name}"), format!("{v} outside [0,1]")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("lambda", self.lambda)?;
        for (name, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{name}"), "must be finite and non-negative"));
            }
        }
        if !(self.gradient_penalty >= 0.0) {
            return Err(Error::config("train.gradient_penalty", "must be non-negative"));
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("top_k", self.top_k),
            ("epochs", self.epochs),
            ("hidden", self.hidden),
            ("weight_refresh", self.weight_refresh),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("train.{name}"), "must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("train.clip", "must be positive"));
        }
        if self.mmd_bandwidths.is_empty() || self.mmd_bandwidths.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::config("train.mmd_bandwidths", "need at least one positive factor"));
        }
        Ok(())
    }
}

/// Per-source relevance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainWeights {
    pub semantic: Vec<f64>,
    pub structural: Vec<f64>,
    pub combined: Vec<f64>,
}

impl DomainWeights {
    pub fn new(semantic: Vec<f64>, structural: Vec<f64>, gamma: f64) -> Result<DomainWeights> {
        if semantic.len() != structural.len() {
            return Err(Error::input(format!(
                "{} semantic vs {} structural weights",
                semantic.len(),
                structural.len()
            )));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::input(format!("gamma {gamma} outside [0,1]")));
        }
        if let Some(w) = semantic.iter().chain(&structural).find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::input(format!("domain weight {w} outside [0,1]")));
        }
        let combined = semantic
            .iter()
            .zip(&structural)
            .map(|(&d, &g)| combine_weights(d, g, gamma))
            .collect();
        Ok(DomainWeights {
            semantic,
            structural,
            combined,
        })
    }

    pub fn uniform(m: usize) -> DomainWeights {
        DomainWeights {
            semantic: vec![1.0; m],
            structural: vec![1.0; m],
            combined: vec![1.0; m],
        }
    }
}

/// Relevance of a source from the gap between its mean critic output and
/// the target's.
pub fn semantic_weight(source_mean: f64, target_mean: f64) -> f64 {
    (-(source_mean - target_mean).abs()).exp()
}

pub fn combine_weights(semantic: f64, structural: f64, gamma: f64) -> f64 {
    gamma * semantic + (1.0 - gamma) * structural
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Weighted cross-entropy over sources: each source contributes its weight
/// times its mean negative log-likelihood. Sources without rows contribute 0.
pub fn supervised_loss(logits: &[Matrix], labels: &[Vec<Label>], weights: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() || logits.len() != weights.len() {
        return Err(Error::input("supervised loss needs one logit block, label list and weight per source"));
    }
    let mut total = 0.0;
    for (k, ((z, y), &w)) in logits.iter().zip(labels).zip(weights).enumerate() {
        if z.rows() != y.len() {
            return Err(Error::input(format!("source {k}: {} logit rows for {} labels", z.rows(), y.len())));
        }
        if z.cols() != 2 {
            return Err(Error::input(format!("source {k}: expected 2 logit columns, got {}", z.cols())));
        }
        if y.is_empty() {
            log::debug!("source {k} has an empty batch; it contributes nothing");
            continue;
        }
        let nll: f64 = y.iter().enumerate().map(|(i, l)| -log_softmax_row(z.row(i))[l.index()]).sum();
        total += w * nll / y.len() as f64;
    }
    Ok(total)
}

/// Weighted Wasserstein estimate: sum over sources of weight times the gap
/// between the source's and the target's mean critic output.
pub fn critic_loss(source_outputs: &[Vec<f64>], target_outputs: &[f64], weights: &[f64]) -> Result<f64> {
    if target_outputs.is_empty() {
        return Err(Error::Precondition("critic loss needs at least one target sample".into()));
    }
    if source_outputs.len() != weights.len() {
        return Err(Error::input("critic loss needs one weight per source"));
    }
    let target_mean = target_outputs.iter().sum::<f64>() / target_outputs.len() as f64;
    Ok(source_outputs
        .iter()
        .zip(weights)
        .filter(|(s, _)| !s.is_empty())
        .map(|(s, w)| w * (s.iter().sum::<f64>() / s.len() as f64 - target_mean))
        .sum())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Median Euclidean distance over all pairs of rows of the stacked blocks.
/// Returns 0 with fewer than two rows.
pub fn median_distance(blocks: &[&Matrix]) -> f64 {
    let rows: Vec<&[f64]> = blocks.iter().flat_map(|m| (0..m.rows()).map(move |i| m.row(i))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

/// Bandwidths for the given multipliers of a reference distance; a zero
/// reference falls back to 1.
pub fn kernel_bandwidths(factors: &[f64], reference: f64) -> Vec<f64> {
    let base = if reference > 0.0 { reference } else { 1.0 };
    factors.iter().map(|f| f * base).collect()
}

fn kernel_mean(x: &Matrix, y: &Matrix, sigmas: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let d = sq_dist(x.row(i), y.row(j));
            s += sigmas.iter().map(|sg| (-d / (2.0 * sg * sg)).exp()).sum::<f64>();
        }
    }
    s / (x.rows() * y.rows() * sigmas.len()) as f64
}

/// Biased squared MMD under the average of Gaussian kernels of widths
/// `sigmas`.
pub fn mmd2(x: &Matrix, y: &Matrix, sigmas: &[f64]) -> f64 {
    if x.rows() == 0 || y.rows() == 0 {
        return 0.0;
    }
    kernel_mean(x, x, sigmas) + kernel_mean(y, y, sigmas) - 2.0 * kernel_mean(x, y, sigmas)
}

/// Sum of squared MMD over ordered pairs of distinct sources, with
/// bandwidths scaled by the median distance of the joint sample.
pub fn mmd_pairwise(sources: &[Matrix], factors: &[f64]) -> f64 {
    if sources.len() < 2 {
        return 0.0;
    }
    let refs: Vec<&Matrix> = sources.iter().collect();
    let sigmas = kernel_bandwidths(factors, median_distance(&refs));
    let mut total = 0.0;
    for i in 0..sources.len() {
        for j in i + 1..sources.len() {
            total += 2.0 * mmd2(&sources[i], &sources[j], &sigmas);
        }
    }
    total
}

/// Tape form of the supervised loss: `-sum_i row_weight[i] * log p(y_i)`.
pub fn tape_supervised_loss(tape: &mut Tape, logits: Var, labels: &[Label], row_weights: &[f64]) -> Result<Var> {
    let (r, c) = tape.shape(logits);
    if r != labels.len() || r != row_weights.len() || c != 2 {
        return Err(Error::Shape {
            op: "supervised_loss",
            detail: format!("{r}x{c} logits, {} labels, {} weights", labels.len(), row_weights.len()),
        });
    }
    let logp = tape.row_log_softmax(logits)?;
    let coef = Matrix::from_fn(r, 2, |i, j| if j == labels[i].index() { -row_weights[i] } else { 0.0 });
    let coef = tape.constant(coef);
    let picked = tape.hadamard(logp, coef)?;
    tape.reduce_sum(picked)
}

/// Tape form of the critic gap: `sum_i row_weight[i] * s_i - total * mean(t)`.
pub fn tape_critic_gap(tape: &mut Tape, source: Var, target: Var, row_weights: &[f64]) -> Result<Var> {
    if tape.shape(source) != (row_weights.len(), 1) || tape.shape(target).1 != 1 {
        return Err(Error::Shape {
            op: "critic_gap",
            detail: format!("{:?} / {:?} with {} weights", tape.shape(source), tape.shape(target), row_weights.len()),
        });
    }
    if tape.shape(target).0 == 0 {
        return Err(Error::Precondition("critic loss needs at least one target sample".into()));
    }
    let total: f64 = row_weights.iter().sum();
    let w = tape.constant(Matrix::from_vec(row_weights.len(), 1, row_weights.to_vec())?);
    let s = tape.hadamard(source, w)?;
    let s = tape.reduce_sum(s)?;
    let t = tape.reduce_mean(target)?;
    let t = tape.scale(t, total)?;
    tape.sub(s, t)
}

/// Tape form of [`mmd2`].
pub fn tape_mmd2(tape: &mut Tape, x: Var, y: Var, sigmas: &[f64]) -> Result<Var> {
    let kernel_mean = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let d = tape.pairwise_sq_dist(a, b)?;
        let mut terms = Vec::with_capacity(sigmas.len());
        for sg in sigmas {
            let e = tape.scale(d, -1.0 / (2.0 * sg * sg))?;
            let e = tape.exp(e)?;
            terms.push(tape.reduce_mean(e)?);
        }
        let total = tape.sum_all(&terms)?;
        tape.scale(total, 1.0 / sigmas.len() as f64)
    };
    let kxx = kernel_mean(tape, x, x)?;
    let kyy = kernel_mean(tape, y, y)?;
    let kxy = kernel_mean(tape, x, y)?;
    let s = tape.add(kxx, kyy)?;
    let kxy2 = tape.scale(kxy, 2.0)?;
    tape.sub(s, kxy2)
}

/// `coef * (||w|| - 1)^2`. For an affine critic the input gradient is `w`
/// at every point, so this is the gradient penalty at any interpolate.
pub fn tape_gradient_penalty(tape: &mut Tape, w: Var, coef: f64) -> Result<Var> {
    let sq = tape.hadamard(w, w)?;
    let s = tape.reduce_sum(sq)?;
    let l = tape.log(s)?;
    let half = tape.scale(l, 0.5)?;
    let norm = tape.exp(half)?;
    let one = tape.constant(Matrix::scalar(1.0));
    let gap = tape.sub(norm, one)?;
    let g2 = tape.hadamard(gap, gap)?;
    tape.scale(g2, coef)
}

/// Adam with decoupled weight decay, one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Option<Moments>>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
    t: i32,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> AdamW {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: vec![None; ParamId::ALL.len()],
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, id: ParamId, grad: &Matrix) {
        let theta = params.get_mut(id);
        assert_eq!(theta.shape(), grad.shape(), "gradient shape for {}", id.name());
        let slot = self.slots[id.index()].get_or_insert_with(|| Moments {
            m: Matrix::zeros(grad.rows(), grad.cols()),
            v: Matrix::zeros(grad.rows(), grad.cols()),
            t: 0,
        });
        slot.t += 1;
        let c1 = 1.0 - self.beta1.powi(slot.t);
        let c2 = 1.0 - self.beta2.powi(slot.t);
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        let m = slot.m.as_mut_slice();
        let v = slot.v.as_mut_slice();
        for (e, (x, &g)) in theta.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
            m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * g;
            v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * g * g;
            *x = *x * decay - lr * (m[e] / c1) / ((v[e] / c2).sqrt() + self.eps);
        }
    }
}

/// Graph statistics computed once before training.
#[derive(Debug, Clone, Default)]
pub struct Precomputed {
    /// Ego signatures of every node of every source.
    pub signatures: Option<Vec<Vec<EgoSignature>>>,
    /// Structural relevance of each source to the target.
    pub structural: Option<Vec<f64>>,
}

impl Precomputed {
    pub fn compute(ds: &DomainSet) -> Precomputed {
        let gdvs: Vec<GdvTable> = ds
            .sources()
            .par_iter()
            .chain(rayon::iter::once(ds.target()))
            .map(count_orbits)
            .collect();
        let signatures: Vec<Vec<EgoSignature>> = ds.sources().par_iter().map(ego_signatures).collect();
        let (target, sources) = gdvs.split_last().expect("target table");
        Precomputed::from_tables(sources, target, signatures)
    }

    pub fn from_tables(sources: &[GdvTable], target: &GdvTable, signatures: Vec<Vec<EgoSignature>>) -> Precomputed {
        Precomputed {
            signatures: Some(signatures),
            structural: Some(sources.iter().map(|g| histogram_similarity(g, target)).collect()),
        }
    }
}

/// Receives intermediate results during training.
pub trait TrainObserver {
    fn on_topology(&mut self, _epoch: usize, _step: usize, _topology: &CsdTopology) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_d: f64,
    pub reg_p: f64,
    pub weights: DomainWeights,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub wall_time: Vec<Duration>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_weights(&self) -> Option<&DomainWeights> {
        self.epochs.last().map(|e| &e.weights)
    }

    /// `epoch,l_sup,l_d,reg_p,w_1..w_m`; wall times are left out so the file
    /// is reproducible.
    pub fn to_csv(&self) -> String {
        let m = self.epochs.first().map_or(0, |e| e.weights.combined.len());
        let mut out = String::from("epoch,l_sup,l_d,reg_p");
        for k in 1..=m {
            out.push_str(&format!(",w_{k}"));
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}", e.epoch, e.l_sup, e.l_d, e.reg_p));
            for w in &e.weights.combined {
                out.push_str(&format!(",{w}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Mixes a base seed with a path of integers (epoch, step, domain, ...).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |h, &p| mix(h ^ mix(p)))
}

/// Which halves of a training step to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phases {
    pub critic: bool,
    pub generator: bool,
}

impl Phases {
    pub const BOTH: Phases = Phases {
        critic: true,
        generator: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub l_sup: f64,
    pub l_d: f64,
    pub reg_p: f64,
    /// Mean critic output per source batch.
    pub source_critic: Vec<f64>,
    pub target_critic: f64,
}

fn name_term<T>(term: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{term} ({op})"),
        },
        other => other,
    })
}

fn check_term(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric { op: term.to_string() })
    }
}

fn encode(tape: &mut Tape, p: &Bound, batch: &Subbatch) -> Result<Var> {
    let prop = Propagation::for_subbatch(batch)?;
    let x = tape.constant(batch.subgraph.features().clone());
    gcn_forward(tape, p, &prop, x)
}

/// Training state. [`train`] drives it epoch by epoch; tests can run single
/// steps or single phases.
pub struct Trainer<'a> {
    ds: &'a DomainSet,
    cfg: TrainConfig,
    pre: &'a Precomputed,
    params: ModelParams,
    opt: AdamW,
    critic_opt: AdamW,
    weights: DomainWeights,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a DomainSet, cfg: &TrainConfig, pre: &'a Precomputed) -> Result<Trainer<'a>> {
        cfg.validate()?;
        let m = ds.num_sources();
        if cfg.csd == CsdMode::Weighted {
            let sigs = pre
                .signatures
                .as_ref()
                .ok_or_else(|| Error::Precondition("missing precomputed ego signatures".into()))?;
            let aligned = sigs.len() == m && sigs.iter().zip(ds.sources()).all(|(s, g)| s.len() == g.num_nodes());
            if !aligned {
                return Err(Error::Precondition("precomputed ego signatures do not match the sources".into()));
            }
        }
        let weights = if cfg.selective {
            let structural = pre
                .structural
                .clone()
                .ok_or_else(|| Error::Precondition("missing precomputed structural weights".into()))?;
            if structural.len() != m {
                return Err(Error::Precondition(format!("{} structural weights for {m} sources", structural.len())));
            }
            DomainWeights::new(vec![1.0; m], structural, cfg.gamma)?
        } else {
            DomainWeights::uniform(m)
        };
        Ok(Trainer {
            ds,
            cfg: cfg.clone(),
            pre,
            params: ModelParams::init(ds.feature_dim(), cfg.hidden, cfg.seed),
            opt: AdamW::new(cfg.learning_rate, cfg.weight_decay),
            critic_opt: AdamW::new(cfg.learning_rate, cfg.weight_decay),
            weights,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn weights(&self) -> &DomainWeights {
        &self.weights
    }

    /// Enough steps for the largest source to be visited once per epoch in
    /// expectation.
    pub fn steps_per_epoch(&self) -> usize {
        let n = self.ds.sources().iter().map(|g| g.num_nodes()).max().unwrap_or(0);
        n.div_ceil(self.cfg.batch_size).max(1)
    }

    /// Recomputes the semantic weights from mean critic outputs.
    pub fn refresh_weights(&mut self, source_means: &[f64], target_mean: f64) -> Result<()> {
        let semantic = source_means.iter().map(|&s| semantic_weight(s, target_mean)).collect();
        self.weights = DomainWeights::new(semantic, self.weights.structural.clone(), self.cfg.gamma)?;
        Ok(())
    }

    pub fn step(&mut self, epoch: usize, step: usize, phases: Phases, obs: &mut dyn TrainObserver) -> Result<StepStats> {
        let cfg = self.cfg.clone();
        let cfg = &cfg;
        let m = self.ds.num_sources();
        let seed = |d: usize| derive_seed(cfg.seed, &[epoch as u64, step as u64, d as u64]);
        let batches = self
            .ds
            .sources()
            .iter()
            .enumerate()
            .map(|(k, g)| sample_subbatch(g, cfg.batch_size, seed(k)))
            .collect::<Result<Vec<_>>>()?;
        let target_batch = sample_subbatch(self.ds.target(), cfg.batch_size, seed(m))?;

        let mut tape = Tape::new();
        let mut p = self.params.bind(&mut tape, &[Group::Encoder, Group::Other, Group::Classifier]);
        let mut zs = None;
        let mut members = Vec::new();
        let mut labels = Vec::new();
        let mut row_weights = Vec::new();
        let mut ranges = Vec::with_capacity(m);
        for (k, b) in batches.iter().enumerate() {
            let z = encode(&mut tape, &p, b)?;
            zs = Some(match zs {
                None => z,
                Some(acc) => tape.concat_rows(acc, z)?,
            });
            let start = members.len();
            let source_labels = self.ds.sources()[k].labels().expect("sources are labeled");
            let w = self.weights.combined[k] / b.num_centers() as f64;
            for &c in &b.centers {
                members.push(CsdMember { domain: k, node: c });
                labels.push(source_labels[c]);
                row_weights.push(w);
            }
            ranges.push(start..members.len());
        }
        let zs = zs.expect("at least one source");
        let zt = encode(&mut tape, &p, &target_batch)?;

        let (z, zc) = if cfg.csd == CsdMode::Off {
            (zs, None)
        } else {
            let basis = match cfg.topology_source {
                TopologySource::Embeddings => tape.value(zs).clone(),
                TopologySource::Features => {
                    let rows: Vec<Vec<f64>> = members
                        .iter()
                        .map(|mb| self.ds.sources()[mb.domain].features().row(mb.node).to_vec())
                        .collect();
                    Matrix::from_rows(&rows)?
                }
            };
            let sigs: Option<Vec<&EgoSignature>> = match (cfg.csd, &self.pre.signatures) {
                (CsdMode::Weighted, Some(all)) => Some(members.iter().map(|mb| &all[mb.domain][mb.node]).collect()),
                _ => None,
            };
            let topo = build_topology(&basis, members.clone(), cfg.top_k, sigs.as_deref())?;
            obs.on_topology(epoch, step, &topo);
            let gat = name_term("cross-domain encoder", gat_cross_forward(&mut tape, &p, &topo, zs))?;
            let (z, _) = name_term("fusion", fuse(&mut tape, &p, zs, gat.embeddings))?;
            (z, Some(gat.embeddings))
        };

        if phases.critic {
            let z_val = tape.value(z).clone();
            let zt_val = tape.value(zt).clone();
            for _ in 0..cfg.critic_steps {
                self.critic_update(&z_val, &zt_val, &row_weights)?;
            }
        }

        let cw = tape.constant(self.params.get(ParamId::CriticW).clone());
        let cb = tape.constant(self.params.get(ParamId::CriticB).clone());
        p.replace(ParamId::CriticW, cw);
        p.replace(ParamId::CriticB, cb);
        let d_src = criticize(&mut tape, &p, z)?;
        let d_tgt = criticize(&mut tape, &p, zt)?;
        let l_d = name_term("l_d", tape_critic_gap(&mut tape, d_src, d_tgt, &row_weights))?;

        let logits = classify(&mut tape, &p, z)?;
        let l_sup = name_term("l_sup", tape_supervised_loss(&mut tape, logits, &labels, &row_weights))?;

        let reg = match zc {
            Some(zc) if m >= 2 && cfg.eta1 > 0.0 => Some(name_term("reg_p", self.alignment(&mut tape, zc, &ranges))?),
            _ => None,
        };

        let mut total = l_sup;
        if let Some(r) = reg {
            let r = tape.scale(r, cfg.eta1)?;
            total = tape.add(total, r)?;
        }
        let scaled_d = tape.scale(l_d, cfg.eta2)?;
        let total = name_term("total loss", tape.add(total, scaled_d))?;

        let stats = StepStats {
            l_sup: check_term("l_sup", tape.scalar(l_sup))?,
            l_d: check_term("l_d", tape.scalar(l_d))?,
            reg_p: check_term("reg_p", reg.map_or(0.0, |r| tape.scalar(r)))?,
            source_critic: ranges
                .iter()
                .map(|r| {
                    let v = &tape.value(d_src).as_slice()[r.clone()];
                    v.iter().sum::<f64>() / v.len().max(1) as f64
                })
                .collect(),
            target_critic: {
                let v = tape.value(d_tgt).as_slice();
                v.iter().sum::<f64>() / v.len() as f64
            },
        };

        if phases.generator {
            let grads = tape.backward(total)?;
            for &id in ParamId::ALL.iter().filter(|id| id.group() != Group::Critic) {
                if let Some(g) = grads.get(p.var(id)) {
                    self.opt.step(&mut self.params, id, g);
                }
            }
        }
        Ok(stats)
    }

    fn alignment(&self, tape: &mut Tape, zc: Var, ranges: &[std::ops::Range<usize>]) -> Result<Var> {
        let blocks: Vec<Matrix> = ranges
            .iter()
            .map(|r| tape.value(zc).gather_rows(&r.clone().collect::<Vec<_>>()))
            .collect();
        let refs: Vec<&Matrix> = blocks.iter().collect();
        let sigmas = kernel_bandwidths(&self.cfg.mmd_bandwidths, median_distance(&refs));
        let parts = ranges
            .iter()
            .map(|r| tape.gather_rows(zc, r.clone().collect()))
            .collect::<Result<Vec<_>>>()?;
        let mut terms = Vec::new();
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                if ranges[i].is_empty() || ranges[j].is_empty() {
                    continue;
                }
                let t = tape_mmd2(tape, parts[i], parts[j], &sigmas)?;
                terms.push(tape.scale(t, 2.0)?);
            }
        }
        if terms.is_empty() {
            return Ok(tape.constant(Matrix::scalar(0.0)));
        }
        tape.sum_all(&terms)
    }

    fn critic_update(&mut self, zs: &Matrix, zt: &Matrix, row_weights: &[f64]) -> Result<()> {
        let cfg = &self.cfg;
        let mut tape = Tape::new();
        let w = tape.param(self.params.get(ParamId::CriticW).clone());
        let b = tape.param(self.params.get(ParamId::CriticB).clone());
        let zs = tape.constant(zs.clone());
        let zt = tape.constant(zt.clone());
        let score = |tape: &mut Tape, z: Var| -> Result<Var> {
            let o = tape.matmul(z, w)?;
            tape.add_row(o, b)
        };
        let ds = score(&mut tape, zs)?;
        let dt = score(&mut tape, zt)?;
        let gap = name_term("l_d", tape_critic_gap(&mut tape, ds, dt, row_weights))?;
        let mut obj = tape.scale(gap, -cfg.eta2)?;
        if cfg.lipschitz == Lipschitz::GradientPenalty && cfg.gradient_penalty > 0.0 {
            let gp = name_term("gradient penalty", tape_gradient_penalty(&mut tape, w, cfg.gradient_penalty))?;
            obj = tape.add(obj, gp)?;
        }
        let grads = tape.backward(obj)?;
        let gw = grads.get_or_zeros(w, tape.shape(w).0, tape.shape(w).1);
        let gb = grads.get_or_zeros(b, 1, 1);
        self.critic_opt.step(&mut self.params, ParamId::CriticW, &gw);
        self.critic_opt.step(&mut self.params, ParamId::CriticB, &gb);
        if cfg.lipschitz == Lipschitz::Clip {
            let c = cfg.clip;
            for id in [ParamId::CriticW, ParamId::CriticB] {
                self.params.get_mut(id).as_mut_slice().iter_mut().for_each(|x| *x = x.clamp(-c, c));
            }
        }
        Ok(())
    }
}

pub fn train(ds: &DomainSet, cfg: &TrainConfig, pre: &Precomputed) -> Result<(ModelParams, TrainHistory)> {
    train_observed(ds, cfg, pre, &mut ())
}

pub fn train_observed(
    ds: &DomainSet,
    cfg: &TrainConfig,
    pre: &Precomputed,
    obs: &mut dyn TrainObserver,
) -> Result<(ModelParams, TrainHistory)> {
    let mut trainer = Trainer::new(ds, cfg, pre)?;
    let m = ds.num_sources();
    let steps = trainer.steps_per_epoch();
    let mut history = TrainHistory::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut l_sup, mut l_d, mut reg_p) = (0.0, 0.0, 0.0);
        let mut src_means = vec![0.0; m];
        let mut tgt_mean = 0.0;
        for step in 0..steps {
            let s = trainer.step(epoch, step, Phases::BOTH, obs)?;
            l_sup += s.l_sup;
            l_d += s.l_d;
            reg_p += s.reg_p;
            for (acc, v) in src_means.iter_mut().zip(&s.source_critic) {
                *acc += v;
            }
            tgt_mean += s.target_critic;
        }
        let n = steps as f64;
        if cfg.selective && epoch % cfg.weight_refresh == 0 {
            let means: Vec<f64> = src_means.iter().map(|s| s / n).collect();
            trainer.refresh_weights(&means, tgt_mean / n)?;
        }
        let record = EpochRecord {
            epoch,
            l_sup: l_sup / n,
            l_d: l_d / n,
            reg_p: reg_p / n,
            weights: trainer.weights().clone(),
        };
        log::debug!(
            "epoch {epoch}: l_sup {:.4} l_d {:.4} reg_p {:.4} w {:?}",
            record.l_sup,
            record.l_d,
            record.reg_p,
            record.weights.combined
        );
        history.epochs.push(record);
        history.wall_time.push(start.elapsed());
    }
    Ok((trainer.into_params(), history))
}
