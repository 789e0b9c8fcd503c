//! Target-side inference, heterophily refinement and metrics.

use serde::{Deserialize, Serialize};

use crate::domain::DomainSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Label};
use crate::matrix::cosine;
use crate::nn::{bot_probabilities, embed_graph, ModelParams};

pub const DECISION_THRESHOLD: f64 = 0.5;

/// `1 - cos(x_i, mean of neighbor features)` on raw features, in [0, 2].
/// Isolated nodes score 0. A zero vector on either side has cosine 0.
pub fn heterophily_score(graph: &Graph, node: usize) -> Result<f64> {
    graph.degree(node)?;
    let nbrs = graph.neighbors(node);
    if nbrs.is_empty() {
        return Ok(0.0);
    }
    let x = graph.features();
    let mut mean = vec![0.0; graph.feature_dim()];
    for &u in nbrs {
        for (m, v) in mean.iter_mut().zip(x.row(u)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nbrs.len() as f64);
    Ok(1.0 - cosine(x.row(node), &mean))
}

pub fn heterophily_scores(graph: &Graph) -> Vec<f64> {
    (0..graph.num_nodes())
        .map(|v| heterophily_score(graph, v).expect("node in range"))
        .collect()
}

/// How raw heterophily scores are brought to the probability scale before
/// mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScaling {
    /// Min-max over the graph; a constant score maps to 0.5.
    #[default]
    MinMax,
    /// Mix the raw [0, 2] score as is.
    Raw,
}

pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// `lambda * p + (1 - lambda) * score`.
pub fn refine(probabilities: &[f64], raw_scores: &[f64], lambda: f64, scaling: ScoreScaling) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("lambda {lambda} outside [0,1]")));
    }
    if probabilities.len() != raw_scores.len() {
        return Err(Error::input(format!(
            "{} probabilities for {} scores",
            probabilities.len(),
            raw_scores.len()
        )));
    }
    let scores = match scaling {
        ScoreScaling::MinMax => normalize_scores(raw_scores),
        ScoreScaling::Raw => raw_scores.to_vec(),
    };
    if lambda == 1.0 {
        return Ok(probabilities.to_vec());
    }
    if lambda == 0.0 {
        return Ok(scores);
    }
    Ok(probabilities
        .iter()
        .zip(&scores)
        .map(|(p, s)| lambda * p + (1.0 - lambda) * s)
        .collect())
}

pub fn hard_labels(scores: &[f64]) -> Vec<Label> {
    scores
        .iter()
        .map(|&s| if s >= DECISION_THRESHOLD { Label::Bot } else { Label::Human })
        .collect()
}

/// Confusion counts with bots as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn new(labels: &[Label], predicted: &[Label]) -> Result<Confusion> {
        if labels.len() != predicted.len() {
            return Err(Error::input(format!("{} labels for {} predictions", labels.len(), predicted.len())));
        }
        let mut c = Confusion::default();
        for (y, p) in labels.iter().zip(predicted) {
            match (y.is_bot(), p.is_bot()) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2PR / (P + R)`; 0 when there is no true positive.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

pub fn f1_score(labels: &[Label], predicted: &[Label]) -> Result<f64> {
    Ok(Confusion::new(labels, predicted)?.f1())
}

/// Area under the ROC curve from the rank-sum statistic, ties at midranks.
pub fn auc_roc(labels: &[Label], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::input(format!("{} labels for {} scores", labels.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("NaN score"));
    }
    let pos = labels.iter().filter(|l| l.is_bot()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::input("AUC is undefined when only one class is present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k].is_bot()).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub heterophily: f64,
    pub refined: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub auc: f64,
    pub confusion: Confusion,
}

impl MetricReport {
    pub fn new(labels: &[Label], scores: &[f64]) -> Result<MetricReport> {
        let confusion = Confusion::new(labels, &hard_labels(scores))?;
        Ok(MetricReport {
            f1: confusion.f1(),
            auc: auc_roc(labels, scores)?,
            confusion,
        })
    }
}

/// Scores every target node. The target's fused embedding is its in-domain
/// embedding, since it has no cross-domain neighbors.
pub fn predict(params: &ModelParams, target: &Graph, lambda: f64, scaling: ScoreScaling) -> Result<Vec<Prediction>> {
    let z = embed_graph(params, target)?;
    let probs = bot_probabilities(params, &z)?;
    let raw = heterophily_scores(target);
    let refined = refine(&probs, &raw, lambda, scaling)?;
    let labels = hard_labels(&refined);
    Ok((0..target.num_nodes())
        .map(|i| Prediction {
            probability: probs[i],
            heterophily: raw[i],
            refined: refined[i],
            label: labels[i],
        })
        .collect())
}

/// Predicts on the target and only then reads its labels for scoring.
pub fn evaluate(
    ds: &DomainSet,
    params: &ModelParams,
    lambda: f64,
    scaling: ScoreScaling,
) -> Result<(Vec<Prediction>, MetricReport)> {
    let preds = predict(params, ds.target(), lambda, scaling)?;
    let labels = ds
        .target_labels_for_evaluation()
        .ok_or_else(|| Error::Precondition("target labels are unavailable for evaluation".into()))?;
    let scores: Vec<f64> = preds.iter().map(|p| p.refined).collect();
    let report = MetricReport::new(labels, &scores)?;
    Ok((preds, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn star(center: Vec<f64>, leaves: &[Vec<f64>]) -> Graph {
        let mut rows = vec![center];
        rows.extend_from_slice(leaves);
        let edges: Vec<(usize, usize)> = (1..rows.len()).map(|v| (0, v)).collect();
        Graph::from_edges(0, Matrix::from_rows(&rows).unwrap(), None, &edges).unwrap()
    }

    #[test]
    fn heterophily_reference_values() {
        let g = star(vec![1.0, 0.0], &[vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert!(heterophily_score(&g, 0).unwrap().abs() < 1e-12);
        let g = star(vec![1.0, 0.0], &[vec![0.0, 1.0], vec![0.0, 3.0]]);
        assert!((heterophily_score(&g, 0).unwrap() - 1.0).abs() < 1e-12);
        let g = star(vec![1.0, 0.0], &[vec![-1.0, 0.0]]);
        assert!((heterophily_score(&g, 0).unwrap() - 2.0).abs() < 1e-12);
        let g = star(vec![0.0, 0.0], &[vec![1.0, 0.0]]);
        assert_eq!(heterophily_score(&g, 0).unwrap(), 1.0);
    }

    #[test]
    fn isolated_node_scores_zero() {
        let g = Graph::from_edges(0, Matrix::filled(2, 2, 1.0), None, &[]).unwrap();
        assert_eq!(heterophily_score(&g, 1).unwrap(), 0.0);
    }

    #[test]
    fn refine_arithmetic() {
        // raw scores 0, 0.8, 2 normalize to 0, 0.4, 1
        let r = refine(&[0.1, 0.8, 0.3], &[0.0, 0.8, 2.0], 0.5, ScoreScaling::MinMax).unwrap();
        assert!((r[1] - 0.6).abs() < 1e-12);
        let p = [0.2, 0.7, 0.9];
        assert_eq!(refine(&p, &[0.0, 1.0, 2.0], 1.0, ScoreScaling::MinMax).unwrap(), p.to_vec());
        assert_eq!(refine(&p, &[0.0, 1.0, 2.0], 0.0, ScoreScaling::MinMax).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[0.3, 0.3]), vec![0.5, 0.5]);
        assert!(refine(&p, &[0.0; 3], 1.5, ScoreScaling::Raw).is_err());
    }

    #[test]
    fn f1_reference_values() {
        let y = [Label::Bot, Label::Human, Label::Bot, Label::Human];
        assert_eq!(f1_score(&y, &y).unwrap(), 1.0);
        assert!((f1_score(&y, &[Label::Bot; 4]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_reference_values() {
        let y = [Label::Bot, Label::Human, Label::Bot, Label::Human];
        assert_eq!(auc_roc(&y, &[0.9, 0.8, 0.3, 0.1]).unwrap(), 0.75);
        assert_eq!(auc_roc(&y, &[0.9, 0.2, 0.8, 0.1]).unwrap(), 1.0);
        assert_eq!(auc_roc(&y, &[0.5; 4]).unwrap(), 0.5);
        assert!(auc_roc(&[Label::Bot; 3], &[0.1, 0.2, 0.3]).is_err());
    }
}
