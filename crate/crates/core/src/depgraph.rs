//! Dependency graph over prunable parameter slices.
//!
//! A [`PruneUnit`] owns every slice that must disappear together when one
//! attention head, one MLP hidden channel or one residual-stream channel is
//! removed. Units are derived from the fixed component layout of the
//! encoder rather than traced, so coverage can be checked exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{parameter_schema, Component, ModelConfig, ParamKey, TransformerModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    AttnHead,
    MlpChannel,
    EmbedChannel,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::AttnHead, Site::MlpChannel, Site::EmbedChannel];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::AttnHead => "attn_head",
            Site::MlpChannel => "mlp_channel",
            Site::EmbedChannel => "embed_channel",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one prunable unit. `layer` is `None` for embedding channels,
/// which span the whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub site: Site,
    pub layer: Option<usize>,
    pub index: usize,
}

impl UnitId {
    pub fn head(layer: usize, index: usize) -> Self {
        Self {
            site: Site::AttnHead,
            layer: Some(layer),
            index,
        }
    }

    pub fn mlp(layer: usize, index: usize) -> Self {
        Self {
            site: Site::MlpChannel,
            layer: Some(layer),
            index,
        }
    }

    pub fn embed(index: usize) -> Self {
        Self {
            site: Site::EmbedChannel,
            layer: None,
            index,
        }
    }
}

/// Tie-break order: (layer, site, index), network-wide units first.
impl Ord for UnitId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.layer, self.site, self.index).cmp(&(other.layer, other.site, other.index))
    }
}

impl PartialOrd for UnitId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{}[layer {l}, {}]", self.site, self.index),
            None => write!(f, "{}[{}]", self.site, self.index),
        }
    }
}

/// Index range `start..start + len` along one axis of one parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub key: ParamKey,
    pub axis: usize,
    pub start: usize,
    pub len: usize,
}

impl Slice {
    /// Number of scalars in the slice for a tensor of `shape`.
    pub fn size(&self, shape: &[usize]) -> u64 {
        let numel: usize = shape.iter().product();
        (numel / shape[self.axis] * self.len) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneUnit {
    pub id: UnitId,
    pub slices: Vec<Slice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneGroup {
    pub site: Site,
    pub units: Vec<UnitId>,
    pub param_count: u64,
}

impl PruneGroup {
    /// Representative unit (the smallest id) used to key scores and plans.
    pub fn id(&self) -> UnitId {
        self.units[0]
    }
}

/// Axes of `key` that belong to a prunable site.
pub fn prunable_axes(key: &ParamKey) -> Vec<(usize, Site)> {
    use Component::*;
    use Site::*;
    match (key.component, key.name.as_str()) {
        (PatchEmbed, _) => vec![(0, EmbedChannel)],
        (PosEmbed, _) | (Cls, _) => vec![(1, EmbedChannel)],
        (Ln1 | Ln2 | FinalLn, _) => vec![(0, EmbedChannel)],
        (Qkv, "weight") => vec![(0, AttnHead), (1, EmbedChannel)],
        (Qkv, _) => vec![(0, AttnHead)],
        (AttnOut, "weight") => vec![(0, EmbedChannel), (1, AttnHead)],
        (AttnOut, _) => vec![(0, EmbedChannel)],
        (MlpFc1, "weight") => vec![(0, MlpChannel), (1, EmbedChannel)],
        (MlpFc1, _) => vec![(0, MlpChannel)],
        (MlpFc2, "weight") => vec![(0, EmbedChannel), (1, MlpChannel)],
        (MlpFc2, _) => vec![(0, EmbedChannel)],
        (Head, "weight") => vec![(1, EmbedChannel)],
        (Head, _) => vec![],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyGraph {
    config: ModelConfig,
    units: Vec<PruneUnit>,
    /// Undirected coupling edges, stored once with the smaller index first.
    edges: BTreeSet<(usize, usize)>,
    #[serde(skip)]
    lookup: HashMap<UnitId, usize>,
    #[serde(skip)]
    shapes: BTreeMap<ParamKey, Vec<usize>>,
}

fn head_slices(config: &ModelConfig, layer: usize, head: usize) -> Vec<Slice> {
    let dh = config.head_dim;
    let width = config.attn_width(layer);
    let qkv_w = ParamKey::block(layer, Component::Qkv, "weight");
    let qkv_b = ParamKey::block(layer, Component::Qkv, "bias");
    let mut out = Vec::with_capacity(7);
    for key in [qkv_w, qkv_b] {
        for section in 0..3 {
            out.push(Slice {
                key: key.clone(),
                axis: 0,
                start: section * width + head * dh,
                len: dh,
            });
        }
    }
    out.push(Slice {
        key: ParamKey::block(layer, Component::AttnOut, "weight"),
        axis: 1,
        start: head * dh,
        len: dh,
    });
    out
}

fn mlp_slices(layer: usize, channel: usize) -> Vec<Slice> {
    let s = |component, name, axis| Slice {
        key: ParamKey::block(layer, component, name),
        axis,
        start: channel,
        len: 1,
    };
    vec![
        s(Component::MlpFc1, "weight", 0),
        s(Component::MlpFc1, "bias", 0),
        s(Component::MlpFc2, "weight", 1),
    ]
}

fn embed_slices(config: &ModelConfig, channel: usize) -> Vec<Slice> {
    parameter_schema(config)
        .keys()
        .flat_map(|key| {
            prunable_axes(key)
                .into_iter()
                .filter(|(_, site)| *site == Site::EmbedChannel)
                .map(move |(axis, _)| Slice {
                    key: key.clone(),
                    axis,
                    start: channel,
                    len: 1,
                })
        })
        .collect()
}

impl DependencyGraph {
    /// Derives every unit of every site from the model's component layout.
    pub fn build(model: &TransformerModel) -> Result<Self> {
        let schema = parameter_schema(model.config());
        if let Some(key) = model.params().keys().find(|k| !schema.contains_key(k)) {
            return Err(Error::UnknownParameter(key.to_string()));
        }
        Self::from_config(model.config())
    }

    /// Same graph as [`DependencyGraph::build`], derived from the config
    /// alone so that large layouts can be planned without materializing
    /// their weights.
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut units = Vec::new();
        for l in 0..config.num_layers() {
            for h in 0..config.num_heads[l] {
                units.push(PruneUnit {
                    id: UnitId::head(l, h),
                    slices: head_slices(config, l, h),
                });
            }
            for j in 0..config.mlp_hidden[l] {
                units.push(PruneUnit {
                    id: UnitId::mlp(l, j),
                    slices: mlp_slices(l, j),
                });
            }
        }
        for k in 0..config.embed_dim {
            units.push(PruneUnit {
                id: UnitId::embed(k),
                slices: embed_slices(config, k),
            });
        }
        // Every coupling in this architecture is internal to a unit: a head's
        // Q/K/V rows and output columns, an MLP channel's fc1 row and fc2
        // column, and a residual channel across all layers. No edges needed.
        Ok(Self::from_units(config.clone(), units, BTreeSet::new()))
    }

    pub(crate) fn from_units(config: ModelConfig, units: Vec<PruneUnit>, edges: BTreeSet<(usize, usize)>) -> Self {
        let lookup = units.iter().enumerate().map(|(i, u)| (u.id, i)).collect();
        let shapes = parameter_schema(&config);
        Self {
            config,
            units,
            edges,
            lookup,
            shapes,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn units(&self) -> &[PruneUnit] {
        &self.units
    }

    pub fn unit(&self, id: UnitId) -> Result<&PruneUnit> {
        self.lookup
            .get(&id)
            .map(|&i| &self.units[i])
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    pub fn units_of(&self, site: Site) -> impl Iterator<Item = &PruneUnit> {
        self.units.iter().filter(move |u| u.id.site == site)
    }

    pub fn edges(&self) -> impl Iterator<Item = (UnitId, UnitId)> + '_ {
        self.edges
            .iter()
            .map(|&(a, b)| (self.units[a].id, self.units[b].id))
    }

    /// Couples two units so that neither can be removed alone.
    pub fn add_edge(&mut self, a: UnitId, b: UnitId) -> Result<()> {
        let ia = self.index_of(a)?;
        let ib = self.index_of(b)?;
        if ia != ib {
            self.edges.insert((ia.min(ib), ia.max(ib)));
        }
        Ok(())
    }

    fn index_of(&self, id: UnitId) -> Result<usize> {
        self.lookup
            .get(&id)
            .copied()
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    fn neighbours(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == idx {
                Some(b)
            } else if b == idx {
                Some(a)
            } else {
                None
            }
        })
    }

    pub fn unit_size(&self, unit: &PruneUnit) -> u64 {
        unit.slices
            .iter()
            .map(|s| self.shapes.get(&s.key).map_or(0, |shape| s.size(shape)))
            .sum()
    }

    /// Connected component of the coupling edges that contains `id`.
    pub fn group_for(&self, id: UnitId) -> Result<PruneGroup> {
        let start = self.index_of(id)?;
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in self.neighbours(i) {
                if seen.insert(j) {
                    queue.push_back(j);
                }
            }
        }
        let mut units: Vec<UnitId> = seen.iter().map(|&i| self.units[i].id).collect();
        units.sort();
        let param_count = seen.iter().map(|&i| self.unit_size(&self.units[i])).sum();
        Ok(PruneGroup {
            site: id.site,
            units,
            param_count,
        })
    }

    /// All groups whose units belong to `sites`, each reported once.
    pub fn groups(&self, sites: &[Site]) -> Vec<PruneGroup> {
        let mut covered = BTreeSet::new();
        let mut out = Vec::new();
        for u in &self.units {
            if !sites.contains(&u.id.site) || covered.contains(&u.id) {
                continue;
            }
            let g = self.group_for(u.id).expect("unit from this graph");
            covered.extend(g.units.iter().copied());
            out.push(g);
        }
        out
    }

    /// Sum over units of `site` of their owned slice sizes.
    pub fn slice_total(&self, site: Site) -> u64 {
        self.units_of(site).map(|u| self.unit_size(u)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: DependencyGraph = serde_json::from_str(s)?;
        Ok(Self::from_units(g.config, g.units, g.edges))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Some indices of a prunable axis belong to no unit.
    MissingCoverage { key: String, axis: usize, site: Site, missing: usize },
    /// Some indices are owned by more than one unit.
    Overlap { key: String, axis: usize, site: Site, duplicated: usize },
    /// A slice addresses a parameter, axis or range that does not exist.
    InvalidSlice { unit: String, key: String, axis: usize },
    /// A slice of one site lies on an axis owned by another site.
    WrongSite { unit: String, key: String, axis: usize },
    AsymmetricEdge { a: String, b: String },
    /// A coupled group mixes sites.
    MixedGroup { unit: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks exact coverage, disjointness and group closure of `graph`
/// against the parameters actually stored in `model`.
pub fn validate(graph: &DependencyGraph, model: &TransformerModel) -> ValidationReport {
    let mut violations = Vec::new();
    // coverage counters per (key, axis)
    let mut counts: BTreeMap<(ParamKey, usize), (Site, Vec<u32>)> = BTreeMap::new();
    for (key, t) in model.params() {
        for (axis, site) in prunable_axes(key) {
            counts.insert((key.clone(), axis), (site, vec![0; t.shape()[axis]]));
        }
    }
    for unit in graph.units() {
        for s in &unit.slices {
            match counts.get_mut(&(s.key.clone(), s.axis)) {
                None => violations.push(Violation::InvalidSlice {
                    unit: unit.id.to_string(),
                    key: s.key.to_string(),
                    axis: s.axis,
                }),
                Some((site, c)) => {
                    if *site != unit.id.site {
                        violations.push(Violation::WrongSite {
                            unit: unit.id.to_string(),
                            key: s.key.to_string(),
                            axis: s.axis,
                        });
                    } else if s.start + s.len > c.len() {
                        violations.push(Violation::InvalidSlice {
                            unit: unit.id.to_string(),
                            key: s.key.to_string(),
                            axis: s.axis,
                        });
                    } else {
                        c[s.start..s.start + s.len].iter_mut().for_each(|v| *v += 1);
                    }
                }
            }
        }
    }
    for ((key, axis), (site, c)) in &counts {
        let missing = c.iter().filter(|&&v| v == 0).count();
        let duplicated = c.iter().filter(|&&v| v > 1).count();
        if missing > 0 {
            violations.push(Violation::MissingCoverage {
                key: key.to_string(),
                axis: *axis,
                site: *site,
                missing,
            });
        }
        if duplicated > 0 {
            violations.push(Violation::Overlap {
                key: key.to_string(),
                axis: *axis,
                site: *site,
                duplicated,
            });
        }
    }
    for (a, b) in graph.edges() {
        if a.site != b.site {
            violations.push(Violation::MixedGroup { unit: a.to_string() });
        }
        // stored undirected; a missing reverse lookup means a dangling edge
        if graph.group_for(b).map_or(true, |g| !g.units.contains(&a)) {
            violations.push(Violation::AsymmetricEdge {
                a: a.to_string(),
                b: b.to_string(),
            });
        }
    }
    ValidationReport { violations }
}
