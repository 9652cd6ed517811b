//! Global grouped structural pruning: rank groups, pick the cheapest until the
//! target fraction of prunable parameters is gone, then rebuild a smaller
//! dense model.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::depgraph::{prunable_axes, DependencyGraph, Site, UnitId};
use crate::error::{Error, Result};
use crate::importance::{Aggregation, Criterion, ScoreTable};
use crate::model::{macs_count, param_count, Component, ModelConfig, ParamKey, ParamStore, TransformerModel};
use crate::tensor::ops::gather_axis;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinWidths {
    pub heads: usize,
    pub mlp: usize,
    pub embed: usize,
}

impl Default for MinWidths {
    fn default() -> Self {
        Self {
            heads: 1,
            mlp: 1,
            embed: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Fraction of prunable parameters to remove, in `[0, 1)`.
    pub ratio: f64,
    pub criterion: Criterion,
    pub sites: Vec<Site>,
    #[serde(default)]
    pub min_widths: MinWidths,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub seed: u64,
}

impl PruneSpec {
    pub fn new(ratio: f64, criterion: Criterion, sites: &[Site]) -> Self {
        Self {
            ratio,
            criterion,
            sites: sites.to_vec(),
            min_widths: MinWidths::default(),
            aggregation: Aggregation::Mean,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::InvalidSpec(format!("ratio {} outside [0, 1)", self.ratio)));
        }
        if self.sites.is_empty() {
            return Err(Error::InvalidSpec("no prunable sites enabled".into()));
        }
        let w = self.min_widths;
        if w.heads == 0 || w.mlp == 0 || w.embed == 0 {
            return Err(Error::InvalidSpec("minimum widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovedGroup {
    pub group: UnitId,
    pub units: Vec<UnitId>,
    pub score: f64,
    /// Parameters this removal took out given everything removed before it.
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub source: ModelConfig,
    pub spec: PruneSpec,
    /// Parameters owned by the enabled sites in the source model.
    pub prunable_params: u64,
    pub removed: Vec<RemovedGroup>,
    pub removed_params: u64,
    /// Score of the last removed group; `None` for an empty plan.
    pub threshold: Option<f64>,
    pub target: ModelConfig,
}

impl PrunePlan {
    pub fn removed_fraction(&self) -> f64 {
        if self.prunable_params == 0 {
            0.0
        } else {
            self.removed_params as f64 / self.prunable_params as f64
        }
    }

    pub fn removed_units(&self) -> impl Iterator<Item = UnitId> + '_ {
        self.removed.iter().flat_map(|r| r.units.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Widths {
    heads: Vec<usize>,
    mlp: Vec<usize>,
    embed: usize,
}

impl Widths {
    fn of(config: &ModelConfig) -> Self {
        Self {
            heads: config.num_heads.clone(),
            mlp: config.mlp_hidden.clone(),
            embed: config.embed_dim,
        }
    }

    fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.num_heads = self.heads.clone();
        c.mlp_hidden = self.mlp.clone();
        c.embed_dim = self.embed;
        c
    }

    fn zeroed(config: &ModelConfig, sites: &[Site]) -> Self {
        let mut w = Self::of(config);
        for site in sites {
            match site {
                Site::AttnHead => w.heads.iter_mut().for_each(|h| *h = 0),
                Site::MlpChannel => w.mlp.iter_mut().for_each(|m| *m = 0),
                Site::EmbedChannel => w.embed = 0,
            }
        }
        w
    }

    /// Removes `units`, or names the floor that forbids it.
    fn without(&self, units: &[UnitId], floors: MinWidths) -> std::result::Result<Self, String> {
        let mut w = self.clone();
        for u in units {
            match (u.site, u.layer) {
                (Site::AttnHead, Some(l)) => w.heads[l] -= 1,
                (Site::MlpChannel, Some(l)) => w.mlp[l] -= 1,
                (Site::EmbedChannel, _) => w.embed -= 1,
                _ => unreachable!("block units carry a layer"),
            }
        }
        if let Some(l) = w.heads.iter().position(|&h| h < floors.heads) {
            return Err(format!("minimum of {} head(s) per layer (layer {l})", floors.heads));
        }
        if let Some(l) = w.mlp.iter().position(|&m| m < floors.mlp) {
            return Err(format!("minimum of {} mlp channel(s) per layer (layer {l})", floors.mlp));
        }
        if w.embed < floors.embed {
            return Err(format!("minimum of {} embedding channels", floors.embed));
        }
        Ok(w)
    }
}

/// Greedy global selection in ascending score order, ties broken by
/// `(layer, site, index)`. Each group is charged the parameters its removal
/// frees given the removals already taken, so the plan total is exact even
/// when sites overlap (a head's Q/K/V rows also span embedding columns).
pub fn plan_prune(graph: &DependencyGraph, scores: &ScoreTable, spec: &PruneSpec) -> Result<PrunePlan> {
    spec.validate()?;
    let source = graph.config().clone();
    let base_params = param_count(&source);
    let prunable = base_params - param_count(&Widths::zeroed(&source, &spec.sites).apply(&source));
    let goal = spec.ratio * prunable as f64;

    let mut ranked = Vec::new();
    for group in graph.groups(&spec.sites) {
        let id = group.id();
        let s = scores.get(id).ok_or_else(|| Error::MissingScore(id.to_string()))?;
        if !s.value.is_finite() || s.value < 0.0 {
            return Err(Error::InvalidSpec(format!("score {} for {id} is not a finite non-negative value", s.value)));
        }
        ranked.push((s.value, group));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id().cmp(&b.1.id())));

    let mut widths = Widths::of(&source);
    let mut current = base_params;
    let mut removed = Vec::new();
    let mut blocked = BTreeSet::new();
    for (score, group) in ranked {
        if (base_params - current) as f64 >= goal {
            break;
        }
        match widths.without(&group.units, spec.min_widths) {
            Ok(next) => {
                let after = param_count(&next.apply(&source));
                removed.push(RemovedGroup {
                    group: group.id(),
                    units: group.units,
                    score,
                    params: current - after,
                });
                widths = next;
                current = after;
            }
            Err(floor) => {
                blocked.insert(floor);
            }
        }
    }
    let removed_params = base_params - current;
    if (removed_params as f64) < goal {
        return Err(Error::RatioUnreachable {
            ratio: spec.ratio,
            reached: removed_params as f64 / prunable as f64,
            constraint: if blocked.is_empty() {
                "no remaining groups".into()
            } else {
                blocked.into_iter().collect::<Vec<_>>().join("; ")
            },
        });
    }
    Ok(PrunePlan {
        target: widths.apply(&source),
        source,
        spec: spec.clone(),
        prunable_params: prunable,
        threshold: removed.last().map(|r| r.score),
        removed,
        removed_params,
    })
}

struct Kept {
    heads: Vec<Vec<usize>>,
    mlp: Vec<Vec<usize>>,
    embed: Vec<usize>,
}

fn kept_indices(plan: &PrunePlan) -> Result<Kept> {
    let c = &plan.source;
    let mut gone: BTreeMap<(Site, Option<usize>), BTreeSet<usize>> = BTreeMap::new();
    for u in plan.removed_units() {
        let limit = match (u.site, u.layer) {
            (Site::AttnHead, Some(l)) if l < c.num_layers() => c.num_heads[l],
            (Site::MlpChannel, Some(l)) if l < c.num_layers() => c.mlp_hidden[l],
            (Site::EmbedChannel, None) => c.embed_dim,
            _ => return Err(Error::PlanMismatch(format!("unit {u} does not exist in the model"))),
        };
        if u.index >= limit || !gone.entry((u.site, u.layer)).or_default().insert(u.index) {
            return Err(Error::PlanMismatch(format!("unit {u} is out of range or removed twice")));
        }
    }
    let keep = |site, layer, n| -> Vec<usize> {
        let g = gone.get(&(site, layer));
        (0..n).filter(|i| g.is_none_or(|g| !g.contains(i))).collect()
    };
    Ok(Kept {
        heads: (0..c.num_layers()).map(|l| keep(Site::AttnHead, Some(l), c.num_heads[l])).collect(),
        mlp: (0..c.num_layers()).map(|l| keep(Site::MlpChannel, Some(l), c.mlp_hidden[l])).collect(),
        embed: keep(Site::EmbedChannel, None, c.embed_dim),
    })
}

fn axis_indices(config: &ModelConfig, kept: &Kept, key: &ParamKey, axis: usize, site: Site) -> Vec<usize> {
    let dh = config.head_dim;
    match site {
        Site::EmbedChannel => kept.embed.clone(),
        Site::MlpChannel => kept.mlp[key.layer.expect("block key")].clone(),
        Site::AttnHead => {
            let l = key.layer.expect("block key");
            let heads = &kept.heads[l];
            let sections = if key.component == Component::Qkv && axis == 0 { 3 } else { 1 };
            let width = config.attn_width(l);
            let mut out = Vec::with_capacity(sections * heads.len() * dh);
            for s in 0..sections {
                for &h in heads {
                    out.extend(s * width + h * dh..s * width + (h + 1) * dh);
                }
            }
            out
        }
    }
}

/// Rebuilds `model` as a dense model without the plan's units.
pub fn apply_prune(model: &TransformerModel, plan: &PrunePlan) -> Result<TransformerModel> {
    if model.config() != &plan.source {
        return Err(Error::PlanMismatch("plan was computed for a different model configuration".into()));
    }
    let kept = kept_indices(plan)?;
    let mut store = ParamStore::new();
    for (key, t) in model.params() {
        let mut t = t.clone();
        for (axis, site) in prunable_axes(key) {
            let idx = axis_indices(&plan.source, &kept, key, axis, site);
            if idx.len() != t.shape()[axis] {
                t = gather_axis(&t, axis, &idx)?;
            }
        }
        store.insert(key.clone(), t);
    }
    let pruned = TransformerModel::from_parts(plan.target.clone(), store)?;
    debug_assert_eq!(
        param_count(pruned.config()),
        param_count(&plan.source) - plan.removed_params
    );
    Ok(pruned)
}

/// Copy of `model` with every slice of the plan's units set to zero, at the
/// original shapes. Equivalent to [`apply_prune`] for head and mlp units; an
/// embedding channel changes layer-norm statistics and is rejected.
pub fn zero_mask(model: &TransformerModel, graph: &DependencyGraph, plan: &PrunePlan) -> Result<TransformerModel> {
    if model.config() != &plan.source {
        return Err(Error::PlanMismatch("plan was computed for a different model configuration".into()));
    }
    let mut masked = model.clone();
    for id in plan.removed_units() {
        if id.site == Site::EmbedChannel {
            return Err(Error::InvalidSpec("embedding channels cannot be emulated by zero masks".into()));
        }
        for s in &graph.unit(id)?.slices {
            let t = masked.param_mut(&s.key)?;
            let (outer, n, inner) = crate::tensor::axis_split(t.shape(), s.axis);
            let data = t.data_mut();
            for o in 0..outer {
                let base = (o * n + s.start) * inner;
                data[base..base + s.len * inner].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(masked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupMeasurement {
    pub base_ms: f64,
    pub pruned_ms: f64,
    /// Median base time over median pruned time.
    pub measured: f64,
    pub theoretical: f64,
    pub trials: usize,
}

fn median_forward(model: &TransformerModel, images: &Tensor, trials: usize) -> Result<Duration> {
    model.forward(images, false)?; // warm-up
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        std::hint::black_box(model.forward(images, false)?);
        times.push(t0.elapsed());
    }
    times.sort();
    Ok(times[trials / 2])
}

/// Wall-clock forward speedup of `pruned` over `base` on the same batch.
/// Both run on the calling thread; fewer than five trials are raised to five.
pub fn measure_speedup(
    base: &TransformerModel,
    pruned: &TransformerModel,
    images: &Tensor,
    trials: usize,
) -> Result<SpeedupMeasurement> {
    let trials = trials.max(5);
    let b = median_forward(base, images, trials)?;
    let p = median_forward(pruned, images, trials)?;
    Ok(SpeedupMeasurement {
        base_ms: b.as_secs_f64() * 1e3,
        pruned_ms: p.as_secs_f64() * 1e3,
        measured: b.as_secs_f64() / p.as_secs_f64().max(1e-12),
        theoretical: theoretical_speedup(base.config(), pruned.config()),
        trials,
    })
}

pub fn theoretical_speedup(base: &ModelConfig, pruned: &ModelConfig) -> f64 {
    macs_count(base) as f64 / macs_count(pruned) as f64
}

/// Formats a duration as `HH:MM:SS`.
pub fn hms(d: Duration) -> String {
    let s = d.as_secs();
    format!("{:02}:{:02}:{:02}", s / 3600, s / 60 % 60, s % 60)
}

/// Wall-clock fields, kept apart so reports can be compared byte-for-byte
/// once this subtree is dropped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneTiming {
    pub speedup: Option<SpeedupMeasurement>,
    pub finetune_wall_clock: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub criterion: Criterion,
    pub ratio: f64,
    pub sites: Vec<Site>,
    pub removed: Vec<RemovedGroup>,
    pub threshold: Option<f64>,
    pub removed_fraction: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub theoretical_speedup: f64,
    pub heads_before: usize,
    pub heads_after: usize,
    pub timing: PruneTiming,
}

impl PruneReport {
    pub fn new(plan: &PrunePlan, pruned: &TransformerModel) -> Self {
        let (before, after) = (&plan.source, pruned.config());
        Self {
            criterion: plan.spec.criterion,
            ratio: plan.spec.ratio,
            sites: plan.spec.sites.clone(),
            removed: plan.removed.clone(),
            threshold: plan.threshold,
            removed_fraction: plan.removed_fraction(),
            params_before: param_count(before),
            params_after: param_count(after),
            macs_before: macs_count(before),
            macs_after: macs_count(after),
            theoretical_speedup: theoretical_speedup(before, after),
            heads_before: before.total_heads(),
            heads_after: after.total_heads(),
            timing: PruneTiming::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depgraph::validate;
    use crate::importance::{score_groups, ImportanceScore, ScoringOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(graph: &DependencyGraph, sites: &[Site], f: impl Fn(UnitId) -> f64) -> ScoreTable {
        ScoreTable {
            scores: graph
                .groups(sites)
                .into_iter()
                .map(|g| {
                    let id = g.id();
                    (
                        id,
                        ImportanceScore {
                            group: id,
                            criterion: Criterion::L1,
                            value: f(id),
                            calibration: 0,
                        },
                    )
                })
                .collect(),
        }
    }

    fn images(batch: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[batch, 3, 32, 32], |_| rng.random_range(-1.0..1.0))
    }

    const BLOCK_SITES: [Site; 2] = [Site::AttnHead, Site::MlpChannel];

    #[test]
    fn zero_ratio_is_empty_and_identity() {
        let m = TransformerModel::init(ModelConfig::toy(), 0).unwrap();
        let g = DependencyGraph::build(&m).unwrap();
        let spec = PruneSpec::new(0.0, Criterion::L1, &Site::ALL);
        let plan = plan_prune(&g, &table(&g, &Site::ALL, |_| 1.0), &spec).unwrap();
        assert!(plan.removed.is_empty());
        assert_eq!(plan.threshold, None);
        assert_eq!(apply_prune(&m, &plan).unwrap(), m);
    }

    #[test]
    fn vit_base_heads_halved() {
        let cfg = ModelConfig::vit_base();
        let g = DependencyGraph::from_config(&cfg).unwrap();
        let spec = PruneSpec::new(0.5, Criterion::Random, &[Site::AttnHead]);
        let m = TransformerModel::from_parts_unchecked(cfg.clone(), ParamStore::new());
        let opts = ScoringOptions {
            criterion: Criterion::Random,
            sites: &[Site::AttnHead],
            aggregation: Aggregation::Mean,
            seed: 3,
            gradients: None,
        };
        let scores = score_groups(&g, &m, &opts).unwrap();
        let plan = plan_prune(&g, &scores, &spec).unwrap();
        assert_eq!(cfg.total_heads(), 144);
        assert_eq!(plan.removed.len(), 72);
        assert_eq!(plan.target.total_heads(), 72);
        assert_eq!(plan.removed_fraction(), 0.5);
    }

    #[test]
    fn smallest_mlp_channel_goes_first() {
        let mut m = TransformerModel::init(ModelConfig::toy(), 2).unwrap();
        let key = ParamKey::block(1, Component::MlpFc1, "weight");
        let d = m.config().embed_dim;
        m.param_mut(&key).unwrap().data_mut()[37 * d..38 * d].iter_mut().for_each(|v| *v *= 1e-3);
        let g = DependencyGraph::build(&m).unwrap();
        let opts = ScoringOptions {
            criterion: Criterion::L1,
            sites: &BLOCK_SITES,
            aggregation: Aggregation::Mean,
            seed: 0,
            gradients: None,
        };
        let scores = score_groups(&g, &m, &opts).unwrap();
        // oracle: exhaustive minimum over the score table
        let min = scores
            .scores
            .values()
            .min_by(|a, b| a.value.total_cmp(&b.value))
            .unwrap();
        assert_eq!(min.group, UnitId::mlp(1, 37));
        let plan = plan_prune(&g, &scores, &PruneSpec::new(0.01, Criterion::L1, &BLOCK_SITES)).unwrap();
        assert_eq!(plan.removed[0].group, UnitId::mlp(1, 37));
    }

    #[test]
    fn ties_break_by_layer_site_index() {
        let m = TransformerModel::init(ModelConfig::toy(), 2).unwrap();
        let g = DependencyGraph::build(&m).unwrap();
        let plan = plan_prune(&g, &table(&g, &BLOCK_SITES, |_| 0.5), &PruneSpec::new(0.05, Criterion::L1, &BLOCK_SITES)).unwrap();
        let ids: Vec<_> = plan.removed.iter().map(|r| r.group).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert_eq!(ids[0], UnitId::head(0, 0));
    }

    #[test]
    fn remove_one_head_matches_mask() {
        let m = TransformerModel::init(ModelConfig::toy(), 6).unwrap();
        let g = DependencyGraph::build(&m).unwrap();
        let scores = table(&g, &[Site::AttnHead], |id| if id == UnitId::head(0, 2) { 0.0 } else { 1.0 });
        let plan = plan_prune(&g, &scores, &PruneSpec::new(0.01, Criterion::L1, &[Site::AttnHead])).unwrap();
        assert_eq!(plan.removed.len(), 1);
        let pruned = apply_prune(&m, &plan).unwrap();
        assert_eq!(pruned.config().num_heads, vec![3, 4]);

        // only the attn_out columns, as the weakest form of the mask
        let mut masked = m.clone();
        let w = masked.param_mut(&ParamKey::block(0, Component::AttnOut, "weight")).unwrap();
        let cols = w.shape()[1];
        for r in 0..w.shape()[0] {
            w.data_mut()[r * cols + 32..r * cols + 48].iter_mut().for_each(|v| *v = 0.0);
        }
        let x = images(3, 1);
        let a = pruned.forward(&x, false).unwrap().logits;
        let b = masked.forward(&x, false).unwrap().logits;
        assert!(a.max_abs_diff(&b) <= 1e-9);
        let c = zero_mask(&m, &g, &plan).unwrap().forward(&x, false).unwrap().logits;
        assert!(a.max_abs_diff(&c) <= 1e-9);
    }

    #[test]
    fn remove_mlp_channels_matches_mask() {
        let m = TransformerModel::init(ModelConfig::toy(), 8).unwrap();
        let g = DependencyGraph::build(&m).unwrap();
        let scores = table(&g, &BLOCK_SITES, |id| {
            ChaCha8Rng::seed_from_u64(id.index as u64 * 31 + id.layer.unwrap_or(0) as u64).random::<f64>()
        });
        let plan = plan_prune(&g, &scores, &PruneSpec::new(0.3, Criterion::L1, &BLOCK_SITES)).unwrap();
        let pruned = apply_prune(&m, &plan).unwrap();
        let masked = zero_mask(&m, &g, &plan).unwrap();
        let x = images(2, 9);
        let diff = pruned
            .forward(&x, false)
            .unwrap()
            .logits
            .max_abs_diff(&masked.forward(&x, false).unwrap().logits);
        assert!(diff <= 1e-9, "{diff}");
        assert!(validate(&DependencyGraph::build(&pruned).unwrap(), &pruned).is_ok());
    }

    #[test]
    fn accounting_is_exact_with_embed_channels() {
        let m = TransformerModel::init(ModelConfig::toy(), 1).unwrap();
        let g = DependencyGraph::build(&m).unwrap();
        let opts = ScoringOptions {
            criterion: Criterion::L2,
            sites: &Site::ALL,
            aggregation: Aggregation::Mean,
            seed: 0,
            gradients: None,
        };
        let scores = score_groups(&g, &m, &opts).unwrap();
        for ratio in [0.25, 0.5, 0.95] {
            let plan = plan_prune(&g, &scores, &PruneSpec::new(ratio, Criterion::L2, &Site::ALL)).unwrap();
            let pruned = apply_prune(&m, &plan).unwrap();
            let report = PruneReport::new(&plan, &pruned);
            let removed: u64 = plan.removed.iter().map(|r| r.params).sum();
            assert_eq!(report.params_after, report.params_before - removed);
            assert_eq!(report.params_after as usize, pruned.num_parameters());
            assert_eq!(report.macs_after, macs_count(pruned.config()));
            assert!(plan.removed_fraction() >= ratio);
            let max_group = plan.removed.iter().map(|r| r.params).max().unwrap();
            assert!((plan.removed_params - max_group) as f64 <= ratio * plan.prunable_params as f64);
            assert!(pruned.config().embed_dim >= 8);
            assert!(validate(&DependencyGraph::build(&pruned).unwrap(), &pruned).is_ok());
            let logits = pruned.forward(&images(2, 3), false).unwrap().logits;
            assert_eq!(logits.shape(), &[2, 7]);
            assert!(logits.is_finite());
        }
    }

    #[test]
    fn unreachable_ratio_names_the_floor() {
        let m = TransformerModel::init(ModelConfig::toy(), 1).unwrap();
        let g = DependencyGraph::build(&m).unwrap();
        let spec = PruneSpec::new(0.9, Criterion::L1, &[Site::AttnHead]);
        let err = plan_prune(&g, &table(&g, &[Site::AttnHead], |_| 1.0), &spec).unwrap_err();
        match err {
            Error::RatioUnreachable { reached, constraint, .. } => {
                assert_eq!(reached, 0.75);
                assert!(constraint.contains("head"), "{constraint}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_scores_and_foreign_plans_rejected() {
        let m = TransformerModel::init(ModelConfig::toy(), 1).unwrap();
        let g = DependencyGraph::build(&m).unwrap();
        let spec = PruneSpec::new(0.5, Criterion::L1, &Site::ALL);
        assert!(matches!(
            plan_prune(&g, &table(&g, &[Site::AttnHead], |_| 1.0), &spec),
            Err(Error::MissingScore(_))
        ));
        let plan = plan_prune(&g, &table(&g, &[Site::AttnHead], |_| 1.0), &PruneSpec::new(0.5, Criterion::L1, &[Site::AttnHead])).unwrap();
        let other = TransformerModel::init(ModelConfig::uniform(32, 3, 8, 64, 2, 4, 16, 128, 5), 1).unwrap();
        assert!(matches!(apply_prune(&other, &plan), Err(Error::PlanMismatch(_))));
        let mut dup = plan.clone();
        dup.removed.push(dup.removed[0].clone());
        assert!(matches!(apply_prune(&m, &dup), Err(Error::PlanMismatch(_))));
        assert!(PruneSpec::new(1.0, Criterion::L1, &Site::ALL).validate().is_err());
    }

    #[test]
    fn plans_are_deterministic_and_speedup_monotone() {
        let m = TransformerModel::init(ModelConfig::toy(), 4).unwrap();
        let g = DependencyGraph::build(&m).unwrap();
        let opts = ScoringOptions {
            criterion: Criterion::Random,
            sites: &Site::ALL,
            aggregation: Aggregation::Mean,
            seed: 1,
            gradients: None,
        };
        let scores = score_groups(&g, &m, &opts).unwrap();
        let p50 = plan_prune(&g, &scores, &PruneSpec::new(0.5, Criterion::Random, &Site::ALL)).unwrap();
        assert_eq!(p50, plan_prune(&g, &scores, &PruneSpec::new(0.5, Criterion::Random, &Site::ALL)).unwrap());
        let p95 = plan_prune(&g, &scores, &PruneSpec::new(0.95, Criterion::Random, &Site::ALL)).unwrap();
        let s50 = theoretical_speedup(&p50.source, &p50.target);
        let s95 = theoretical_speedup(&p95.source, &p95.target);
        assert!(s95 > s50 && s50 > 1.0, "{s50} {s95}");
    }

    #[test]
    fn self_speedup_is_near_one() {
        let m = TransformerModel::init(ModelConfig::toy(), 4).unwrap();
        let s = measure_speedup(&m, &m, &images(8, 0), 7).unwrap();
        assert_eq!(s.theoretical, 1.0);
        assert!((0.8..=1.25).contains(&s.measured), "{}", s.measured);
    }

    #[test]
    fn hms_format() {
        assert_eq!(hms(Duration::from_secs(3723)), "01:02:03");
        assert_eq!(hms(Duration::from_millis(999)), "00:00:00");
    }
}
