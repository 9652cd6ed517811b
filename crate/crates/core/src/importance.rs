//! Group importance under five criteria: L1 and L2 magnitude, first-order
//! Taylor saliency, diagonal-Hessian (optimal brain damage) saliency with an
//! empirical-Fisher diagonal, and a seeded random baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depgraph::{DependencyGraph, PruneGroup, Site, UnitId};
#[cfg(test)]
use crate::depgraph::{PruneUnit, Slice};
use crate::error::{Error, Result};
use crate::model::{ParamKey, TransformerModel};
use crate::tensor::{axis_split, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    L1,
    L2,
    Taylor,
    Hessian,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::L1,
        Criterion::L2,
        Criterion::Taylor,
        Criterion::Hessian,
        Criterion::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::L1 => "l1",
            Criterion::L2 => "l2",
            Criterion::Taylor => "taylor",
            Criterion::Hessian => "hessian",
            Criterion::Random => "random",
        }
    }

    pub fn needs_gradients(self) -> bool {
        matches!(self, Criterion::Taylor | Criterion::Hessian)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown criterion {s:?}")))
    }
}

/// How per-scalar saliencies are reduced to one group score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub group: UnitId,
    pub criterion: Criterion,
    pub value: f64,
    /// Calibration batches behind the score; zero for data-free criteria.
    pub calibration: usize,
}

/// Labeled images used to estimate gradients.
#[derive(Clone, Debug)]
pub struct CalibrationBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Gradient statistics over calibration data: the batch-mean gradient and
/// the per-sample mean squared gradient (empirical Fisher diagonal).
#[derive(Clone, Debug, Default)]
pub struct GradientStats {
    pub mean_grad: BTreeMap<ParamKey, Vec<f64>>,
    pub fisher: BTreeMap<ParamKey, Vec<f64>>,
    pub batches: usize,
    pub samples: usize,
}

impl GradientStats {
    /// One backward pass per calibration sample. The per-batch gradient is
    /// the mean of that batch's per-sample gradients, so both statistics
    /// come from the same passes.
    pub fn collect(model: &TransformerModel, batches: &[CalibrationBatch]) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::InvalidSpec("calibration needs at least one batch".into()));
        }
        let c = model.config();
        let image_len = c.channels * c.image_size * c.image_size;
        let mut mean_grad: BTreeMap<ParamKey, Vec<f64>> = model
            .params()
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        let mut fisher = mean_grad.clone();
        let mut samples = 0;
        for batch in batches {
            let n = batch.labels.len();
            if n == 0 {
                return Err(Error::InvalidSpec("empty calibration batch".into()));
            }
            model.check_images(&batch.images)?;
            for i in 0..n {
                let img = Tensor::new(
                    vec![1, c.channels, c.image_size, c.image_size],
                    batch.images.data()[i * image_len..(i + 1) * image_len].to_vec(),
                )?;
                let (_, grads) = model.loss_and_grads(&img, &batch.labels[i..i + 1], |_| true)?;
                for (k, g) in grads {
                    let mg = mean_grad.get_mut(&k).expect("same keys");
                    let fi = fisher.get_mut(&k).expect("same keys");
                    for j in 0..g.len() {
                        mg[j] += g[j] / n as f64;
                        fi[j] += g[j] * g[j];
                    }
                }
                samples += 1;
            }
        }
        let nb = batches.len() as f64;
        mean_grad.values_mut().flatten().for_each(|v| *v /= nb);
        fisher.values_mut().flatten().for_each(|v| *v /= samples as f64);
        Ok(Self {
            mean_grad,
            fisher,
            batches: batches.len(),
            samples,
        })
    }
}

/// First-order Taylor saliency of one scalar.
pub fn taylor_saliency(weight: f64, grad: f64) -> f64 {
    (grad * weight).powi(2)
}

/// Optimal-brain-damage saliency `½·h·w²` of one scalar.
pub fn obd_saliency(weight: f64, hessian_diag: f64) -> f64 {
    0.5 * hessian_diag * weight * weight
}

/// Visits the flat indices of every scalar owned by the group's slices.
fn for_each_scalar(
    graph: &DependencyGraph,
    model: &TransformerModel,
    group: &PruneGroup,
    mut f: impl FnMut(&ParamKey, usize, &Tensor),
) -> Result<usize> {
    let mut count = 0;
    for id in &group.units {
        for s in &graph.unit(*id)?.slices {
            let t = model.param(&s.key)?;
            let (outer, n, inner) = axis_split(t.shape(), s.axis);
            if s.start + s.len > n {
                return Err(Error::PlanMismatch(format!("slice of {} out of range", s.key)));
            }
            for o in 0..outer {
                for j in s.start..s.start + s.len {
                    for i in 0..inner {
                        f(&s.key, (o * n + j) * inner + i, t);
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyGroup(group.id().to_string()));
    }
    Ok(count)
}

fn reduce(total: f64, count: usize, agg: Aggregation) -> f64 {
    match agg {
        Aggregation::Mean => total / count as f64,
        Aggregation::Sum => total,
    }
}

fn score(group: &PruneGroup, criterion: Criterion, value: f64, calibration: usize) -> ImportanceScore {
    ImportanceScore {
        group: group.id(),
        criterion,
        value,
        calibration,
    }
}

/// Mean absolute weight over the group.
pub fn score_l1(graph: &DependencyGraph, model: &TransformerModel, group: &PruneGroup, agg: Aggregation) -> Result<ImportanceScore> {
    let mut total = 0.0;
    let n = for_each_scalar(graph, model, group, |_, i, t| total += t.data()[i].abs())?;
    Ok(score(group, Criterion::L1, reduce(total, n, agg), 0))
}

/// Root-mean-square weight over the group (the L2 norm under `Sum`).
pub fn score_l2(graph: &DependencyGraph, model: &TransformerModel, group: &PruneGroup, agg: Aggregation) -> Result<ImportanceScore> {
    let mut total = 0.0;
    let n = for_each_scalar(graph, model, group, |_, i, t| total += t.data()[i].powi(2))?;
    Ok(score(group, Criterion::L2, reduce(total, n, agg).sqrt(), 0))
}

fn stat<'a>(map: &'a BTreeMap<ParamKey, Vec<f64>>, key: &ParamKey) -> Result<&'a [f64]> {
    map.get(key)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::MissingGradient(key.to_string()))
}

pub fn score_taylor(
    graph: &DependencyGraph,
    model: &TransformerModel,
    group: &PruneGroup,
    stats: &GradientStats,
    agg: Aggregation,
) -> Result<ImportanceScore> {
    let mut total = 0.0;
    let mut missing = None;
    let n = for_each_scalar(graph, model, group, |k, i, t| match stat(&stats.mean_grad, k) {
        Ok(g) => total += taylor_saliency(t.data()[i], g[i]),
        Err(e) => missing = Some(e),
    })?;
    if let Some(e) = missing {
        return Err(e);
    }
    Ok(score(group, Criterion::Taylor, reduce(total, n, agg), stats.batches))
}

pub fn score_hessian(
    graph: &DependencyGraph,
    model: &TransformerModel,
    group: &PruneGroup,
    stats: &GradientStats,
    agg: Aggregation,
) -> Result<ImportanceScore> {
    let mut total = 0.0;
    let mut missing = None;
    let n = for_each_scalar(graph, model, group, |k, i, t| match stat(&stats.fisher, k) {
        Ok(h) => total += obd_saliency(t.data()[i], h[i]),
        Err(e) => missing = Some(e),
    })?;
    if let Some(e) = missing {
        return Err(e);
    }
    Ok(score(group, Criterion::Hessian, reduce(total, n, agg), stats.batches))
}

/// Uniform value in `[0, 1)` determined by `(seed, group)` alone.
pub fn score_random(group: &PruneGroup, seed: u64) -> ImportanceScore {
    let id = group.id();
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(id.site as u64).to_le_bytes());
    key[16..24].copy_from_slice(&id.layer.map_or(u64::MAX, |l| l as u64).to_le_bytes());
    key[24..].copy_from_slice(&(id.index as u64).to_le_bytes());
    let value = ChaCha8Rng::from_seed(key).random::<f64>();
    score(group, Criterion::Random, value, 0)
}

/// Scores of every group of the enabled sites, keyed by group id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scores: BTreeMap<UnitId, ImportanceScore>,
}

impl ScoreTable {
    pub fn get(&self, id: UnitId) -> Option<&ImportanceScore> {
        self.scores.get(&id)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// CSV with header `site,layer,index,criterion,score`; `layer` is empty
    /// for network-wide units.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("site,layer,index,criterion,score\n");
        for s in self.scores.values() {
            let layer = s.group.layer.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.group.site, layer, s.group.index, s.criterion, s.value
            ));
        }
        out
    }
}

/// Options shared by every criterion.
#[derive(Clone, Debug)]
pub struct ScoringOptions<'a> {
    pub criterion: Criterion,
    pub sites: &'a [Site],
    pub aggregation: Aggregation,
    pub seed: u64,
    /// Required by the gradient-based criteria.
    pub gradients: Option<&'a GradientStats>,
}

pub fn score_groups(graph: &DependencyGraph, model: &TransformerModel, opts: &ScoringOptions) -> Result<ScoreTable> {
    let needs = || {
        opts.gradients
            .ok_or_else(|| Error::MissingGradient(format!("{} criterion needs calibration gradients", opts.criterion)))
    };
    let mut scores = BTreeMap::new();
    for group in graph.groups(opts.sites) {
        let s = match opts.criterion {
            Criterion::L1 => score_l1(graph, model, &group, opts.aggregation)?,
            Criterion::L2 => score_l2(graph, model, &group, opts.aggregation)?,
            Criterion::Taylor => score_taylor(graph, model, &group, needs()?, opts.aggregation)?,
            Criterion::Hessian => score_hessian(graph, model, &group, needs()?, opts.aggregation)?,
            Criterion::Random => score_random(&group, opts.seed),
        };
        debug_assert!(s.value >= 0.0 && s.value.is_finite());
        scores.insert(group.id(), s);
    }
    Ok(ScoreTable { scores })
}
