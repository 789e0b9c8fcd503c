use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::graph::{Graph, Label};

/// Labeled source graphs plus one target graph whose labels are withheld.
///
/// Target labels are moved out of the target graph on construction and are
/// only reachable through [`DomainSet::target_labels_for_evaluation`], which
/// counts every access so tests can assert training never touched them.
#[derive(Debug)]
pub struct DomainSet {
    sources: Vec<Graph>,
    target: Graph,
    target_labels: Option<Vec<Label>>,
    label_reads: AtomicUsize,
}

impl Clone for DomainSet {
    fn clone(&self) -> Self {
        DomainSet {
            sources: self.sources.clone(),
            target: self.target.clone(),
            target_labels: self.target_labels.clone(),
            label_reads: AtomicUsize::new(0),
        }
    }
}

impl DomainSet {
    pub fn new(mut sources: Vec<Graph>, mut target: Graph) -> Result<DomainSet> {
        if sources.is_empty() {
            return Err(Error::input("a domain set needs at least one source"));
        }
        let dim = target.feature_dim();
        for (k, s) in sources.iter_mut().enumerate() {
            if s.labels().is_none() {
                return Err(Error::input(format!("source {k} is unlabeled")));
            }
            if s.feature_dim() != dim {
                return Err(Error::input(format!(
                    "source {k} has feature dim {}, target has {dim}",
                    s.feature_dim()
                )));
            }
            s.set_domain_id(k);
        }
        target.set_domain_id(sources.len());
        let target_labels = target.take_labels();
        Ok(DomainSet {
            sources,
            target,
            target_labels,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[Graph] {
        &self.sources
    }

    /// The target graph. It never carries labels.
    pub fn target(&self) -> &Graph {
        &self.target
    }

    pub fn feature_dim(&self) -> usize {
        self.target.feature_dim()
    }

    /// Ground truth for the target, for metric computation only.
    pub fn target_labels_for_evaluation(&self) -> Option<&[Label]> {
        self.label_reads.fetch_add(1, Ordering::SeqCst);
        self.target_labels.as_deref()
    }

    pub fn target_label_reads(&self) -> usize {
        self.label_reads.load(Ordering::SeqCst)
    }

    /// Keeps only the listed sources, in the given order.
    pub fn select_sources(&self, indices: &[usize]) -> Result<DomainSet> {
        let mut sources = Vec::with_capacity(indices.len());
        for &i in indices {
            sources.push(
                self.sources
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::input(format!("no source {i}")))?,
            );
        }
        let mut target = self.target.clone();
        target.set_domain_id(sources.len());
        let mut out = DomainSet::new(sources, target)?;
        out.target_labels = self.target_labels.clone();
        Ok(out)
    }
}
