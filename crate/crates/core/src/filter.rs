//! Pool-based filtering of a candidate set down to the frame budget.
//!
//! Every strategy breaks ties by acquisition order (lower index wins), and a
//! candidate set that already fits the budget passes through unchanged.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{self, cosine_from_parts, dot, DensityMetric};
use crate::model::{frame_confidence, BBox, CandidateSet, FilteredSet};

pub const DEFAULT_AREA_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[serde(rename = "ff")]
    FarthestFirst,
    Tfdp,
    Moderate,
    LeastConfidence,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FarthestFirst,
        Strategy::Tfdp,
        Strategy::Moderate,
        Strategy::LeastConfidence,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FarthestFirst => "ff",
            Strategy::Tfdp => "tfdp",
            Strategy::Moderate => "moderate",
            Strategy::LeastConfidence => "least-confidence",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (expected ff, tfdp, moderate, least-confidence or random)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub strategy: Strategy,
    pub budget: usize,
    /// Required by, and only by, [`Strategy::Random`].
    pub seed: Option<u64>,
    pub density_metric: DensityMetric,
    pub area_epsilon: f64,
}

impl FilterConfig {
    pub fn new(strategy: Strategy, budget: usize) -> Self {
        FilterConfig {
            strategy,
            budget,
            seed: None,
            density_metric: DensityMetric::default(),
            area_epsilon: DEFAULT_AREA_EPSILON,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_density_metric(mut self, metric: DensityMetric) -> Self {
        self.density_metric = metric;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        match (self.strategy, self.seed) {
            (Strategy::Random, None) => {
                return Err(Error::Config("random strategy requires a seed".into()))
            }
            (s, Some(_)) if s != Strategy::Random => {
                return Err(Error::Config(format!("strategy {s} does not take a seed")))
            }
            _ => {}
        }
        if !(self.area_epsilon > 0.0 && self.area_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "area epsilon must be positive, got {}",
                self.area_epsilon
            )));
        }
        Ok(())
    }
}

/// FILTER(S, B): reduce `set` to at most `cfg.budget` frames.
pub fn filter(set: &CandidateSet, cfg: &FilterConfig) -> Result<FilteredSet> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Empty("cannot filter an empty candidate set"));
    }
    let budget = cfg.budget;
    if set.len() <= budget {
        let all: Vec<usize> = (0..set.len()).collect();
        return Ok(FilteredSet::from_indices(set, &all, budget));
    }
    match cfg.strategy {
        Strategy::FarthestFirst => ff_select(set, budget, cfg.density_metric),
        Strategy::Tfdp => tfdp_select(set, budget, cfg.area_epsilon),
        Strategy::Moderate => moderate_select(set, budget),
        Strategy::LeastConfidence => least_confidence_select(set, budget),
        Strategy::Random => random_select(set, budget, cfg.seed.expect("validated")),
    }
}

/// Indices of the first `k` entries of `keys` in ascending order, ties by
/// index.
fn smallest_k(keys: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    order.truncate(k);
    order
}

fn largest_k(keys: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    order.truncate(k);
    order
}

/// Deterministic farthest-first traversal over `rows`, returning up to
/// `budget` indices in selection order.
///
/// The seed is the densest row; each further pick minimizes the maximum
/// cosine similarity to the rows already selected.
pub fn farthest_first_indices(
    rows: &[&[f64]],
    budget: usize,
    metric: DensityMetric,
) -> Result<Vec<usize>> {
    let n = rows.len();
    let k = budget.min(n);
    if k == 0 {
        return Ok(Vec::new());
    }
    let density = latent::density_scores_with(rows, metric)?;
    let mut first = 0;
    for (i, &s) in density.iter().enumerate().skip(1) {
        if s > density[first] {
            first = i;
        }
    }

    let norms: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    // Max cosine similarity of each row to the selected set.
    let mut max_sim = vec![f64::NEG_INFINITY; n];

    let mut pick = first;
    loop {
        selected.push(pick);
        taken[pick] = true;
        if selected.len() == k {
            break;
        }
        for j in 0..n {
            if !taken[j] {
                let s = cosine_from_parts(dot(rows[pick], rows[j]), norms[pick], norms[j]);
                if s > max_sim[j] {
                    max_sim[j] = s;
                }
            }
        }
        let mut best: Option<usize> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            match best {
                Some(b) if max_sim[j] >= max_sim[b] => {}
                _ => best = Some(j),
            }
        }
        pick = best.expect("fewer than n rows selected");
    }
    Ok(selected)
}

pub fn ff_select(set: &CandidateSet, budget: usize, metric: DensityMetric) -> Result<FilteredSet> {
    if set.is_empty() {
        return Err(Error::Empty("cannot filter an empty candidate set"));
    }
    let idx = farthest_first_indices(&latent::rows_of(set), budget, metric)?;
    Ok(FilteredSet::from_indices(set, &idx, budget))
}

/// Shape complexity of a box treated as a mask: perimeter over the
/// perimeter of the disk of equal area. Areas are clamped below at
/// `area_epsilon`.
pub fn shape_complexity(bbox: &BBox, area_epsilon: f64) -> f64 {
    let area = bbox.area().max(area_epsilon);
    bbox.perimeter() / (2.0 * (std::f64::consts::PI * area).sqrt())
}

/// Per-frame sum of instance shape complexities; 0 for frames without
/// detections.
pub fn tfdp_scores(set: &CandidateSet, area_epsilon: f64) -> Vec<f64> {
    set.items()
        .iter()
        .map(|r| {
            r.detections
                .iter()
                .map(|d| shape_complexity(&d.bbox, area_epsilon))
                .sum()
        })
        .collect()
}

/// The `budget` frames with the highest shape-complexity sum, in descending
/// score order.
pub fn tfdp_select(set: &CandidateSet, budget: usize, area_epsilon: f64) -> Result<FilteredSet> {
    if set.is_empty() {
        return Err(Error::Empty("cannot filter an empty candidate set"));
    }
    let idx = largest_k(&tfdp_scores(set, area_epsilon), budget);
    Ok(FilteredSet::from_indices(set, &idx, budget))
}

/// Absolute gap between each frame's distance to the center and the median
/// of those distances.
pub fn moderate_gaps(set: &CandidateSet) -> Result<Vec<f64>> {
    let d = latent::distances_to_center(set)?;
    let m = latent::quantile(&d, 0.5)?;
    Ok(d.iter().map(|x| (x - m).abs()).collect())
}

pub fn moderate_select(set: &CandidateSet, budget: usize) -> Result<FilteredSet> {
    let idx = smallest_k(&moderate_gaps(set)?, budget);
    Ok(FilteredSet::from_indices(set, &idx, budget))
}

pub fn least_confidence_select(set: &CandidateSet, budget: usize) -> Result<FilteredSet> {
    if set.is_empty() {
        return Err(Error::Empty("cannot filter an empty candidate set"));
    }
    let conf: Vec<f64> = set.items().iter().map(frame_confidence).collect();
    let idx = smallest_k(&conf, budget);
    Ok(FilteredSet::from_indices(set, &idx, budget))
}

/// Uniform sample without replacement drawn from a ChaCha8 generator seeded
/// with `seed`; output is in draw order.
pub fn random_select(set: &CandidateSet, budget: usize, seed: u64) -> Result<FilteredSet> {
    if set.is_empty() {
        return Err(Error::Empty("cannot filter an empty candidate set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = budget.min(set.len());
    let idx = rand::seq::index::sample(&mut rng, set.len(), k).into_vec();
    Ok(FilteredSet::from_indices(set, &idx, budget))
}
