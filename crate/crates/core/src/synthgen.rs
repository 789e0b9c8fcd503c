//! Synthetic multi-domain bot/human networks.
//!
//! Each domain is a degree-corrected two-block graph. A fraction `homophily`
//! of the edges join same-class endpoints; of those, a fraction
//! `bot_cohesion` fall inside the bot block, so a low cohesion yields bots
//! that mostly connect to humans. Features are spherical Gaussians around
//! two class centers translated by a per-domain shift.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::DomainSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Label};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub bot_ratio: f64,
    pub homophily: f64,
    pub bot_cohesion: f64,
    pub mean_degree: f64,
    /// Distance between the two class centers.
    pub class_separation: f64,
    /// Offset applied to both class centers. Empty means zero.
    pub class_center_shift: Vec<f64>,
    pub feature_noise_sigma: f64,
    pub label_flip_rate: f64,
    /// Log-normal sigma of per-node degree propensities.
    pub degree_heterogeneity: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            num_nodes: 500,
            feature_dim: 16,
            bot_ratio: 0.5,
            homophily: 0.3,
            bot_cohesion: 0.2,
            mean_degree: 6.0,
            class_separation: 2.0,
            class_center_shift: Vec::new(),
            feature_noise_sigma: 1.0,
            label_flip_rate: 0.0,
            degree_heterogeneity: 0.5,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}{name}");
        if self.num_nodes < 2 {
            return Err(Error::config(field("num_nodes"), "need at least 2 nodes"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config(field("feature_dim"), "must be positive"));
        }
        if !(self.bot_ratio > 0.0 && self.bot_ratio < 1.0) {
            return Err(Error::config(field("bot_ratio"), "must lie in (0,1)"));
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return Err(Error::config(field("homophily"), format!("{} outside [0,1]", self.homophily)));
        }
        if !(0.0..=1.0).contains(&self.bot_cohesion) {
            return Err(Error::config(field("bot_cohesion"), "must lie in [0,1]"));
        }
        if !(self.mean_degree > 0.0) || self.mean_degree >= self.num_nodes as f64 {
            return Err(Error::config(
                field("mean_degree"),
                format!("{} must be positive and below num_nodes", self.mean_degree),
            ));
        }
        if !(self.class_separation >= 0.0) {
            return Err(Error::config(field("class_separation"), "must be non-negative"));
        }
        if !self.class_center_shift.is_empty() && self.class_center_shift.len() != self.feature_dim {
            return Err(Error::config(field("class_center_shift"), "length must equal feature_dim"));
        }
        if !(self.feature_noise_sigma > 0.0) {
            return Err(Error::config(field("feature_noise_sigma"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_flip_rate) {
            return Err(Error::config(field("label_flip_rate"), "must lie in [0,1)"));
        }
        if !(self.degree_heterogeneity >= 0.0) {
            return Err(Error::config(field("degree_heterogeneity"), "must be non-negative"));
        }
        Ok(())
    }

    /// Class centers (human, bot) after the domain shift.
    pub fn class_centers(&self) -> [Vec<f64>; 2] {
        let axis = class_axis(self.feature_dim);
        let half = self.class_separation / 2.0;
        let shift = |j: usize| self.class_center_shift.get(j).copied().unwrap_or(0.0);
        let human = (0..self.feature_dim).map(|j| shift(j) - half * axis[j]).collect();
        let bot = (0..self.feature_dim).map(|j| shift(j) + half * axis[j]).collect();
        [human, bot]
    }
}

/// Unit direction separating the two classes: alternating signs.
pub fn class_axis(dim: usize) -> Vec<f64> {
    let s = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|j| if j % 2 == 0 { s } else { -s }).collect()
}

pub fn generate_domain(spec: &DomainSpec, seed: u64) -> Result<Graph> {
    spec.validate("")?;
    let n = spec.num_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let classes: Vec<Label> = (0..n)
        .map(|_| if rng.random_bool(spec.bot_ratio) { Label::Bot } else { Label::Human })
        .collect();

    let centers = spec.class_centers();
    let noise = Normal::new(0.0, spec.feature_noise_sigma).expect("positive sigma");
    let mut features = Matrix::zeros(n, spec.feature_dim);
    for (v, class) in classes.iter().enumerate() {
        let c = &centers[class.index()];
        for (x, mu) in features.row_mut(v).iter_mut().zip(c) {
            *x = mu + noise.sample(&mut rng);
        }
    }

    let edges = place_edges(spec, &classes, &mut rng)?;

    let mut labels = classes.clone();
    let bots: Vec<usize> = (0..n).filter(|&v| classes[v].is_bot()).collect();
    let flips = (spec.label_flip_rate * bots.len() as f64).floor() as usize;
    for i in rand::seq::index::sample(&mut rng, bots.len(), flips) {
        labels[bots[i]] = Label::Human;
    }

    Ok(Graph::from_edges(0, features, Some(labels), &edges)?.with_classes(classes))
}

fn place_edges(spec: &DomainSpec, classes: &[Label], rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let n = classes.len();
    let target_edges = (n as f64 * spec.mean_degree / 2.0).round() as usize;
    let propensity = LogNormal::new(0.0, spec.degree_heterogeneity.max(1e-12)).expect("valid lognormal");
    let theta: Vec<f64> = (0..n).map(|_| propensity.sample(rng)).collect();

    let members: [Vec<usize>; 2] = [
        (0..n).filter(|&v| !classes[v].is_bot()).collect(),
        (0..n).filter(|&v| classes[v].is_bot()).collect(),
    ];
    let pickers: Vec<Option<WeightedIndex<f64>>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&v| theta[v])).ok())
        .collect();
    let draw = |class: usize, rng: &mut ChaCha8Rng| -> Option<usize> {
        pickers[class].as_ref().map(|p| members[class][p.sample(rng)])
    };

    let mut seen = std::collections::HashSet::with_capacity(target_edges * 2);
    let mut edges = Vec::with_capacity(target_edges);
    let max_attempts = 50 * target_edges + 1000;
    let mut attempts = 0;
    while edges.len() < target_edges {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::input(format!(
                "could not place {target_edges} distinct edges; graph too small for the requested degree/homophily"
            )));
        }
        let (cu, cv) = if rng.random_bool(spec.homophily) {
            let c = usize::from(rng.random_bool(spec.bot_cohesion));
            (c, c)
        } else {
            (0, 1)
        };
        let (Some(u), Some(v)) = (draw(cu, rng), draw(cv, rng)) else {
            continue;
        };
        if u == v {
            continue;
        }
        let key = (u.min(v), u.max(v));
        if seen.insert(key) {
            edges.push(key);
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSpec {
    /// Template for every source domain (its shift field is overwritten).
    pub source: DomainSpec,
    pub target: DomainSpec,
    /// Distance of each source's class centers from the target's; one entry
    /// per source. Sources are emitted in increasing order of shift.
    pub shifts: Vec<f64>,
    /// Relative spread of per-source mean degree, in [0,1).
    pub degree_spread: f64,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            source: DomainSpec::default(),
            target: DomainSpec::default(),
            shifts: vec![0.0, 1.0],
            degree_spread: 0.2,
            seed: 0,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        self.source.validate("suite.source.")?;
        self.target.validate("suite.target.")?;
        if self.shifts.is_empty() {
            return Err(Error::config("suite.shifts", "need at least one source"));
        }
        if self.shifts.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("suite.shifts", "shifts must be finite and non-negative"));
        }
        if self.source.feature_dim != self.target.feature_dim {
            return Err(Error::config("suite.source.feature_dim", "must equal suite.target.feature_dim"));
        }
        if !(0.0..1.0).contains(&self.degree_spread) {
            return Err(Error::config("suite.degree_spread", "must lie in [0,1)"));
        }
        Ok(())
    }

    pub fn num_sources(&self) -> usize {
        self.shifts.len()
    }

    /// Concrete per-source specs in emission order, plus the per-domain seeds
    /// (sources first, target last).
    pub fn domain_specs(&self) -> Result<(Vec<DomainSpec>, DomainSpec, Vec<u64>)> {
        self.validate()?;
        let dim = self.target.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let base_shift: Vec<f64> = if self.target.class_center_shift.is_empty() {
            vec![0.0; dim]
        } else {
            self.target.class_center_shift.clone()
        };
        let mut shifts = self.shifts.clone();
        shifts.sort_by(f64::total_cmp);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut sources = Vec::with_capacity(shifts.len());
        for &s in &shifts {
            let dir: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let jitter = rng.random_range(-1.0..=1.0) * self.degree_spread;
            let mut spec = self.source.clone();
            spec.class_center_shift = base_shift.iter().zip(&dir).map(|(b, d)| b + s * d / norm).collect();
            spec.mean_degree = self.source.mean_degree * (1.0 + jitter);
            sources.push(spec);
        }
        let seeds = (0..=shifts.len()).map(|_| rng.random::<u64>()).collect();
        Ok((sources, self.target.clone(), seeds))
    }
}

pub fn generate_suite(spec: &SuiteSpec) -> Result<DomainSet> {
    let (sources, target, seeds) = spec.domain_specs()?;
    let graphs = sources
        .iter()
        .zip(&seeds)
        .map(|(s, &seed)| generate_domain(s, seed))
        .collect::<Result<Vec<_>>>()?;
    let target = generate_domain(&target, *seeds.last().expect("target seed"))?;
    DomainSet::new(graphs, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bot_ratio_is_respected() {
        let spec = DomainSpec {
            num_nodes: 1000,
            ..DomainSpec::default()
        };
        let g = generate_domain(&spec, 1).unwrap();
        let bots = g.labels().unwrap().iter().filter(|l| l.is_bot()).count();
        assert!((450..=550).contains(&bots), "{bots}");
    }

    #[test]
    fn exact_label_flip_count() {
        let spec = DomainSpec {
            label_flip_rate: 0.2,
            ..DomainSpec::default()
        };
        let g = generate_domain(&spec, 4).unwrap();
        let classes = g.latent_classes().unwrap();
        let labels = g.labels().unwrap();
        let bots = classes.iter().filter(|c| c.is_bot()).count();
        let flipped = (0..g.num_nodes())
            .filter(|&v| classes[v].is_bot() && !labels[v].is_bot())
            .count();
        assert_eq!(flipped, (0.2 * bots as f64).floor() as usize);
        // only bot -> human flips
        assert!((0..g.num_nodes()).all(|v| classes[v].is_bot() || !labels[v].is_bot()));
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let spec = DomainSpec {
            num_nodes: 10,
            mean_degree: 10.0,
            ..DomainSpec::default()
        };
        assert!(matches!(generate_domain(&spec, 0), Err(Error::Config { field, .. }) if field == "mean_degree"));
        let spec = DomainSpec {
            homophily: 1.5,
            ..DomainSpec::default()
        };
        assert!(matches!(spec.validate(""), Err(Error::Config { field, .. }) if field == "homophily"));
    }

    #[test]
    fn mean_degree_matches_request() {
        let g = generate_domain(&DomainSpec::default(), 9).unwrap();
        let mean = 2.0 * g.num_edges() as f64 / g.num_nodes() as f64;
        assert!((mean - 6.0).abs() < 0.01);
    }

    #[test]
    fn suite_orders_sources_by_shift() {
        let spec = SuiteSpec {
            shifts: vec![3.0, 0.0],
            ..SuiteSpec::default()
        };
        let (sources, _, _) = spec.domain_specs().unwrap();
        let dist = |s: &DomainSpec| s.class_center_shift.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dist(&sources[0]) < 1e-12);
        assert!((dist(&sources[1]) - 3.0).abs() < 1e-9);
    }
}
