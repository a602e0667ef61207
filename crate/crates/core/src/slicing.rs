//! Which parameters each node trains, how many nodes train each parameter,
//! and when each parameter group is synchronized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mlp::slice_range, IndexSet, ModelConfig, ParamId, ParamLayout, Rect, TensorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SliceStrategy {
    /// Slice the MLP up/down projections; everything else is global.
    #[default]
    MlpOnly,
    /// Also slice the Q/K/V projections by head group.
    MlpAndHeads,
    /// Also slice the attention output projection rows by head group.
    MlpHeadsAndWo,
    /// Each node trains the MLPs of a contiguous band of layers
    /// (experimental; known to be unstable).
    ByLayers,
}

impl SliceStrategy {
    pub fn slices_heads(self) -> bool {
        matches!(self, SliceStrategy::MlpAndHeads | SliceStrategy::MlpHeadsAndWo)
    }
}

/// Head indices `{n·h/N, …, (n+1)·h/N − 1}` of group `n`.
pub fn head_group(num_heads: usize, num_slices: usize, n: usize) -> std::ops::Range<usize> {
    let g = num_heads / num_slices;
    n * g..(n + 1) * g
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicePlan {
    num_nodes: usize,
    num_slices: usize,
    strategy: SliceStrategy,
    layout: ParamLayout,
    /// Trainable set of slice index `n`, shared by every node with `k mod N == n`.
    slice_sets: Vec<IndexSet>,
    /// Parameters that belong to a sliced block (trained on `K/N` nodes).
    sliced: IndexSet,
}

pub fn validate_slicing(
    cfg: &ModelConfig,
    num_nodes: usize,
    num_slices: usize,
    strategy: SliceStrategy,
) -> Result<()> {
    if num_nodes == 0 {
        return Err(Error::config("run.num_nodes", "must be at least 1"));
    }
    if num_slices == 0 {
        return Err(Error::config("run.num_slices", "must be at least 1"));
    }
    if num_nodes % num_slices != 0 {
        return Err(Error::config(
            "run.num_slices",
            format!("K is a multiple of N (got K = {num_nodes}, N = {num_slices})"),
        ));
    }
    if cfg.ffn_dim % num_slices != 0 {
        return Err(Error::config(
            "run.num_slices",
            format!("ffn_dim {} must be divisible by N = {num_slices}", cfg.ffn_dim),
        ));
    }
    if strategy.slices_heads() && cfg.num_heads % num_slices != 0 {
        return Err(Error::config(
            "run.num_slices",
            format!("num_heads {} must be divisible by N = {num_slices}", cfg.num_heads),
        ));
    }
    if strategy == SliceStrategy::ByLayers && cfg.num_layers % num_slices != 0 {
        return Err(Error::config(
            "run.num_slices",
            format!("num_layers {} must be divisible by N = {num_slices}", cfg.num_layers),
        ));
    }
    Ok(())
}

pub fn build_slice_plan(
    cfg: &ModelConfig,
    num_nodes: usize,
    num_slices: usize,
    strategy: SliceStrategy,
) -> Result<SlicePlan> {
    cfg.validate()?;
    validate_slicing(cfg, num_nodes, num_slices, strategy)?;
    let layout = ParamLayout::new(cfg);
    let f = cfg.ffn_dim;
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim;

    let mut slice_sets = Vec::with_capacity(num_slices);
    let mut sliced = IndexSet::empty();
    for n in 0..num_slices {
        let mut set = IndexSet::empty();
        let hidden = slice_range(f, num_slices, n);
        let heads = head_group(cfg.num_heads, num_slices, n);
        let head_cols = heads.start * dh..heads.end * dh;
        let band = (n * cfg.num_layers / num_slices)..((n + 1) * cfg.num_layers / num_slices);
        for (t, spec) in layout.tensors().iter().enumerate() {
            let rect = match (strategy, spec.kind) {
                (SliceStrategy::ByLayers, k) if k.is_mlp() => {
                    let l = spec.layer.expect("mlp tensors are per-layer");
                    band.contains(&l).then(|| spec.full_rect())
                }
                (_, TensorKind::MlpUp) => Some(Rect::new(0..d, hidden.clone())),
                (_, TensorKind::MlpDown) => Some(Rect::new(hidden.clone(), 0..d)),
                (s, k) if s.slices_heads() && k.is_qkv() => {
                    Some(Rect::new(0..spec.rows, head_cols.clone()))
                }
                (SliceStrategy::MlpHeadsAndWo, TensorKind::AttnOut) => {
                    Some(Rect::new(head_cols.clone(), 0..spec.cols))
                }
                _ => None,
            };
            let is_sliced = match (strategy, spec.kind) {
                (_, k) if k.is_mlp() => true,
                (s, k) if s.slices_heads() && k.is_qkv() => true,
                (SliceStrategy::MlpHeadsAndWo, TensorKind::AttnOut) => true,
                _ => false,
            };
            if is_sliced {
                if let Some(r) = rect {
                    set.insert(t, r.clone());
                    sliced.insert(t, r);
                }
            } else {
                set.insert_full(&layout, t);
            }
        }
        slice_sets.push(set);
    }
    Ok(SlicePlan {
        num_nodes,
        num_slices,
        strategy,
        layout,
        slice_sets,
        sliced,
    })
}

/// Trained fractions and per-node trainable parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainableFraction {
    pub rho_mlp: f64,
    pub rho_attn: f64,
    pub trainable_params: usize,
}

impl SlicePlan {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_slices(&self) -> usize {
        self.num_slices
    }

    pub fn strategy(&self) -> SliceStrategy {
        self.strategy
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Slice index `n = k mod N` of node `k`.
    pub fn slice_of(&self, node: usize) -> usize {
        node % self.num_slices
    }

    /// `I_k^train`.
    pub fn trainable(&self, node: usize) -> &IndexSet {
        &self.slice_sets[self.slice_of(node)]
    }

    /// `I_k^frozen`, the complement of `I_k^train`.
    pub fn frozen(&self, node: usize) -> IndexSet {
        self.trainable(node).complement(&self.layout)
    }

    pub fn is_trainable(&self, node: usize, id: ParamId) -> bool {
        self.trainable(node).contains(&self.layout, id)
    }

    /// Count vector by definition: `m[i] = Σₖ 1{i ∈ I_k^train}`.
    pub fn count_vector(&self) -> Vec<u32> {
        let mut m = vec![0u32; self.layout.len()];
        for k in 0..self.num_nodes {
            for seg in self.trainable(k).flat_segments(&self.layout) {
                for v in &mut m[seg] {
                    *v += 1;
                }
            }
        }
        m
    }

    /// Closed form: `K/N` on sliced blocks, `K` elsewhere.
    pub fn count_closed_form(&self, id: ParamId) -> u32 {
        if self.sliced.contains(&self.layout, id) {
            (self.num_nodes / self.num_slices) as u32
        } else {
            self.num_nodes as u32
        }
    }

    pub fn trainable_fraction(&self) -> TrainableFraction {
        let inv = 1.0 / self.num_slices as f64;
        TrainableFraction {
            rho_mlp: inv,
            rho_attn: if self.strategy.slices_heads() { inv } else { 1.0 },
            trainable_params: self.trainable(0).len(),
        }
    }

    /// Debug description: one entry per node listing its trainable blocks.
    pub fn describe(&self) -> PlanDescription {
        PlanDescription {
            num_nodes: self.num_nodes,
            num_slices: self.num_slices,
            strategy: self.strategy,
            total_params: self.layout.len(),
            nodes: (0..self.num_nodes)
                .map(|k| NodeDescription {
                    node: k,
                    slice: self.slice_of(k),
                    trainable_params: self.trainable(k).len(),
                    blocks: self
                        .trainable(k)
                        .entries()
                        .iter()
                        .map(|(t, r)| BlockDescription {
                            tensor: self.layout.tensor(*t).label(),
                            rows: [r.rows.start, r.rows.end],
                            cols: [r.cols.start, r.cols.end],
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDescription {
    pub num_nodes: usize,
    pub num_slices: usize,
    pub strategy: SliceStrategy,
    pub total_params: usize,
    pub nodes: Vec<NodeDescription>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescription {
    pub node: usize,
    pub slice: usize,
    pub trainable_params: usize,
    pub blocks: Vec<BlockDescription>,
}

/// Half-open row and column ranges of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDescription {
    pub tensor: String,
    pub rows: [usize; 2],
    pub cols: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyncGrouping {
    #[default]
    AllAtOnce,
    /// Consecutive layers per group, plus one group for embeddings and the
    /// final norm.
    ByLayers { layers_per_group: usize },
    /// One group per MLP slice index, then embeddings, then attention and
    /// normalization parameters.
    BySlices { num_slices: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncGroup {
    pub label: String,
    pub params: IndexSet,
    /// Steps into each window at which this group synchronizes.
    pub offset: usize,
}

/// Streaming synchronization schedule. Group `g` of `G` synchronizes after
/// local step `c` (1-based) whenever `c mod H == ⌊g·H/G⌋`, so every group is
/// synchronized exactly once in any window of `H` consecutive steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSchedule {
    pub grouping: SyncGrouping,
    pub period: usize,
    pub groups: Vec<SyncGroup>,
}

pub fn build_sync_schedule(
    cfg: &ModelConfig,
    grouping: SyncGrouping,
    period: usize,
) -> Result<SyncSchedule> {
    if period == 0 {
        return Err(Error::config("run.local_steps", "H must be at least 1"));
    }
    let layout = ParamLayout::new(cfg);
    let mut groups: Vec<(String, IndexSet)> = Vec::new();
    match grouping {
        SyncGrouping::AllAtOnce => groups.push(("all".into(), IndexSet::full(&layout))),
        SyncGrouping::ByLayers { layers_per_group } => {
            if layers_per_group == 0 || cfg.num_layers % layers_per_group != 0 {
                return Err(Error::config(
                    "run.sync.layers_per_group",
                    format!(
                        "num_layers {} must be divisible by layers_per_group {layers_per_group}",
                        cfg.num_layers
                    ),
                ));
            }
            for g in 0..cfg.num_layers / layers_per_group {
                let band = g * layers_per_group..(g + 1) * layers_per_group;
                let mut set = IndexSet::empty();
                for (t, spec) in layout.tensors().iter().enumerate() {
                    if spec.layer.is_some_and(|l| band.contains(&l)) {
                        set.insert_full(&layout, t);
                    }
                }
                groups.push((format!("layers {}..{}", band.start, band.end), set));
            }
            let mut rest = IndexSet::empty();
            for (t, spec) in layout.tensors().iter().enumerate() {
                if spec.layer.is_none() {
                    rest.insert_full(&layout, t);
                }
            }
            groups.push(("embeddings+final norm".into(), rest));
        }
        SyncGrouping::BySlices { num_slices } => {
            if num_slices == 0 || cfg.ffn_dim % num_slices != 0 {
                return Err(Error::config(
                    "run.sync.num_slices",
                    format!("ffn_dim {} must be divisible by {num_slices}", cfg.ffn_dim),
                ));
            }
            let d = cfg.hidden_dim;
            for n in 0..num_slices {
                let hidden = slice_range(cfg.ffn_dim, num_slices, n);
                let mut set = IndexSet::empty();
                for l in 0..cfg.num_layers {
                    set.insert(
                        layout.index_of(TensorKind::MlpUp, Some(l)),
                        Rect::new(0..d, hidden.clone()),
                    );
                    set.insert(
                        layout.index_of(TensorKind::MlpDown, Some(l)),
                        Rect::new(hidden.clone(), 0..d),
                    );
                }
                groups.push((format!("mlp slice {n}"), set));
            }
            let mut emb = IndexSet::empty();
            let mut attn_norm = IndexSet::empty();
            for (t, spec) in layout.tensors().iter().enumerate() {
                if spec.kind.is_embedding() {
                    emb.insert_full(&layout, t);
                } else if !spec.kind.is_mlp() {
                    attn_norm.insert_full(&layout, t);
                }
            }
            groups.push(("embeddings".into(), emb));
            groups.push(("attention+norms".into(), attn_norm));
        }
    }
    let count = groups.len();
    Ok(SyncSchedule {
        grouping,
        period,
        groups: groups
            .into_iter()
            .enumerate()
            .map(|(g, (label, params))| SyncGroup {
                label,
                params,
                offset: g * period / count,
            })
            .collect(),
    })
}

impl SyncSchedule {
    /// Groups due after completing local step `step` (1-based count).
    pub fn due(&self, step: usize) -> Vec<usize> {
        if step == 0 {
            return Vec::new();
        }
        let phase = step % self.period;
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.offset == phase)
            .map(|(i, _)| i)
            .collect()
    }

    /// Smallest step `> after` at which some group is due.
    pub fn next_sync_after(&self, after: usize) -> usize {
        self.groups
            .iter()
            .map(|g| {
                let base = after - after % self.period + g.offset;
                if base > after {
                    base
                } else {
                    base + self.period
                }
            })
            .min()
            .expect("schedule has at least one group")
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.offset).collect()
    }
}
