//! Flat parameter addressing.
//!
//! All model weights live in one contiguous `Vec<f64>`. A [`ParamLayout`]
//! names every tensor in it and maps a dense [`ParamId`] back to
//! `(tensor, row, col)`. Index sets over that space are unions of rectangles,
//! one or more per tensor, which is exactly the granularity slicing needs
//! (column bands for heads and MLP up-projections, row bands for
//! down-projections).
//!
//! Linear maps are stored input-major (`in × out`) so that a layer computes
//! `X · W`. In that orientation the MLP up-projection is `d × D_ff` and its
//! slice `n` is a column band; the down-projection is `D_ff × d` and its slice
//! `n` is a row band.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;

/// Dense index of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    TokenEmbedding,
    PositionEmbedding,
    Ln1Gain,
    Ln1Bias,
    Query,
    Key,
    Value,
    AttnOut,
    Ln2Gain,
    Ln2Bias,
    MlpUp,
    MlpDown,
    FinalLnGain,
    FinalLnBias,
}

impl TensorKind {
    pub fn name(self) -> &'static str {
        match self {
            TensorKind::TokenEmbedding => "token_embedding",
            TensorKind::PositionEmbedding => "position_embedding",
            TensorKind::Ln1Gain => "ln1_gain",
            TensorKind::Ln1Bias => "ln1_bias",
            TensorKind::Query => "w_q",
            TensorKind::Key => "w_k",
            TensorKind::Value => "w_v",
            TensorKind::AttnOut => "w_o",
            TensorKind::Ln2Gain => "ln2_gain",
            TensorKind::Ln2Bias => "ln2_bias",
            TensorKind::MlpUp => "mlp_up",
            TensorKind::MlpDown => "mlp_down",
            TensorKind::FinalLnGain => "final_ln_gain",
            TensorKind::FinalLnBias => "final_ln_bias",
        }
    }

    /// Weight matrices of linear maps (receive weight decay).
    pub fn is_matrix_weight(self) -> bool {
        matches!(
            self,
            TensorKind::Query
                | TensorKind::Key
                | TensorKind::Value
                | TensorKind::AttnOut
                | TensorKind::MlpUp
                | TensorKind::MlpDown
        )
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, TensorKind::MlpUp | TensorKind::MlpDown)
    }

    pub fn is_qkv(self) -> bool {
        matches!(self, TensorKind::Query | TensorKind::Key | TensorKind::Value)
    }

    pub fn is_embedding(self) -> bool {
        matches!(self, TensorKind::TokenEmbedding | TensorKind::PositionEmbedding)
    }

    pub fn is_norm(self) -> bool {
        matches!(
            self,
            TensorKind::Ln1Gain
                | TensorKind::Ln1Bias
                | TensorKind::Ln2Gain
                | TensorKind::Ln2Bias
                | TensorKind::FinalLnGain
                | TensorKind::FinalLnBias
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub kind: TensorKind,
    pub layer: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn full_rect(&self) -> Rect {
        Rect::new(0..self.rows, 0..self.cols)
    }

    pub fn label(&self) -> String {
        match self.layer {
            Some(l) => format!("layers.{l}.{}", self.kind.name()),
            None => self.kind.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
    num_layers: usize,
}

/// Per-layer tensor order inside the flat vector.
const LAYER_KINDS: [TensorKind; 10] = [
    TensorKind::Ln1Gain,
    TensorKind::Ln1Bias,
    TensorKind::Query,
    TensorKind::Key,
    TensorKind::Value,
    TensorKind::AttnOut,
    TensorKind::Ln2Gain,
    TensorKind::Ln2Bias,
    TensorKind::MlpUp,
    TensorKind::MlpDown,
];

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let a = cfg.attn_dim();
        let mut tensors = Vec::with_capacity(4 + LAYER_KINDS.len() * cfg.num_layers);
        let mut offset = 0;
        let mut push = |kind, layer, rows, cols| {
            tensors.push(TensorSpec {
                kind,
                layer,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        push(TensorKind::TokenEmbedding, None, cfg.vocab_size, d);
        push(TensorKind::PositionEmbedding, None, cfg.seq_len, d);
        for l in 0..cfg.num_layers {
            for kind in LAYER_KINDS {
                let (rows, cols) = match kind {
                    TensorKind::Query | TensorKind::Key | TensorKind::Value => (d, a),
                    TensorKind::AttnOut => (a, d),
                    TensorKind::MlpUp => (d, cfg.ffn_dim),
                    TensorKind::MlpDown => (cfg.ffn_dim, d),
                    _ => (1, d),
                };
                push(kind, Some(l), rows, cols);
            }
        }
        push(TensorKind::FinalLnGain, None, 1, d);
        push(TensorKind::FinalLnBias, None, 1, d);
        Self {
            tensors,
            total: offset,
            num_layers: cfg.num_layers,
        }
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &TensorSpec {
        &self.tensors[idx]
    }

    /// Index of `kind` in `layer` (or the global tensor when `layer` is `None`).
    pub fn index_of(&self, kind: TensorKind, layer: Option<usize>) -> usize {
        match layer {
            None => match kind {
                TensorKind::TokenEmbedding => 0,
                TensorKind::PositionEmbedding => 1,
                TensorKind::FinalLnGain => self.tensors.len() - 2,
                TensorKind::FinalLnBias => self.tensors.len() - 1,
                _ => panic!("{kind:?} is a per-layer tensor"),
            },
            Some(l) => {
                assert!(l < self.num_layers, "layer {l} out of range");
                let pos = LAYER_KINDS
                    .iter()
                    .position(|k| *k == kind)
                    .unwrap_or_else(|| panic!("{kind:?} is not a per-layer tensor"));
                2 + l * LAYER_KINDS.len() + pos
            }
        }
    }

    pub fn spec(&self, kind: TensorKind, layer: Option<usize>) -> &TensorSpec {
        &self.tensors[self.index_of(kind, layer)]
    }

    /// `(tensor index, row, col)` of a parameter.
    pub fn locate(&self, id: ParamId) -> (usize, usize, usize) {
        assert!(id.0 < self.total, "ParamId {} out of range", id.0);
        let t = self.tensors.partition_point(|s| s.offset <= id.0) - 1;
        let spec = &self.tensors[t];
        let local = id.0 - spec.offset;
        (t, local / spec.cols, local % spec.cols)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }
}

/// Axis-aligned block of a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Rect {
    pub fn new(rows: Range<usize>, cols: Range<usize>) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.rows.contains(&r) && self.cols.contains(&c)
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let rows = self.rows.start.max(other.rows.start)..self.rows.end.min(other.rows.end);
        let cols = self.cols.start.max(other.cols.start)..self.cols.end.min(other.cols.end);
        let r = Rect::new(rows, cols);
        (!r.rows.is_empty() && !r.cols.is_empty()).then_some(r)
    }

    /// Pieces of `outer` not covered by `self` (at most four rectangles).
    fn carve_from(&self, outer: &Rect) -> Vec<Rect> {
        let Some(inner) = self.intersect(outer) else {
            return vec![outer.clone()];
        };
        let mut out = Vec::new();
        if inner.rows.start > outer.rows.start {
            out.push(Rect::new(outer.rows.start..inner.rows.start, outer.cols.clone()));
        }
        if inner.cols.start > outer.cols.start {
            out.push(Rect::new(inner.rows.clone(), outer.cols.start..inner.cols.start));
        }
        if inner.cols.end < outer.cols.end {
            out.push(Rect::new(inner.rows.clone(), inner.cols.end..outer.cols.end));
        }
        if inner.rows.end < outer.rows.end {
            out.push(Rect::new(inner.rows.end..outer.rows.end, outer.cols.clone()));
        }
        out
    }

    /// Flat offsets (relative to the tensor start) of each row segment.
    pub fn row_segments(&self, tensor_cols: usize) -> impl Iterator<Item = Range<usize>> + '_ {
        self.rows.clone().map(move |r| {
            let s = r * tensor_cols + self.cols.start;
            s..s + self.cols.len()
        })
    }
}

/// A set of parameters, stored as disjoint rectangles per tensor.
///
/// Entries are kept sorted by tensor index, then by rectangle origin.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndexSet {
    entries: Vec<(usize, Rect)>,
}

impl IndexSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn full(layout: &ParamLayout) -> Self {
        Self {
            entries: layout
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| (i, t.full_rect()))
                .collect(),
        }
    }

    /// Adds a rectangle of tensor `tensor`. Overlap with existing entries is
    /// a caller bug.
    pub fn insert(&mut self, tensor: usize, rect: Rect) {
        if rect.is_empty() {
            return;
        }
        debug_assert!(
            self.entries
                .iter()
                .all(|(t, r)| *t != tensor || r.intersect(&rect).is_none()),
            "overlapping rectangles in IndexSet"
        );
        let key = (tensor, rect.rows.start, rect.cols.start);
        let pos = self
            .entries
            .partition_point(|(t, r)| (*t, r.rows.start, r.cols.start) < key);
        self.entries.insert(pos, (tensor, rect));
    }

    pub fn insert_full(&mut self, layout: &ParamLayout, tensor: usize) {
        self.insert(tensor, layout.tensor(tensor).full_rect());
    }

    pub fn entries(&self) -> &[(usize, Rect)] {
        &self.entries
    }

    /// Number of parameters in the set.
    pub fn len(&self) -> usize {
        self.entries.iter().map(|(_, r)| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rects_for(&self, tensor: usize) -> impl Iterator<Item = &Rect> {
        self.entries
            .iter()
            .filter(move |(t, _)| *t == tensor)
            .map(|(_, r)| r)
    }

    pub fn touches(&self, tensor: usize) -> bool {
        self.entries.iter().any(|(t, _)| *t == tensor)
    }

    pub fn contains(&self, layout: &ParamLayout, id: ParamId) -> bool {
        let (t, r, c) = layout.locate(id);
        self.rects_for(t).any(|rect| rect.contains(r, c))
    }

    pub fn intersect(&self, other: &IndexSet) -> IndexSet {
        let mut out = IndexSet::empty();
        for (t, a) in &self.entries {
            for b in other.rects_for(*t) {
                if let Some(r) = a.intersect(b) {
                    out.insert(*t, r);
                }
            }
        }
        out
    }

    pub fn complement(&self, layout: &ParamLayout) -> IndexSet {
        let mut out = IndexSet::empty();
        for (t, spec) in layout.tensors().iter().enumerate() {
            let mut pieces = vec![spec.full_rect()];
            for hole in self.rects_for(t) {
                pieces = pieces.iter().flat_map(|p| hole.carve_from(p)).collect();
            }
            for p in pieces {
                out.insert(t, p);
            }
        }
        out
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        let mut out = self.clone();
        for (t, r) in &other.entries {
            out.insert(*t, r.clone());
        }
        out
    }

    /// Flat-index ranges covered by the set, in entry order.
    pub fn flat_segments<'a>(
        &'a self,
        layout: &'a ParamLayout,
    ) -> impl Iterator<Item = Range<usize>> + 'a {
        self.entries.iter().flat_map(move |(t, rect)| {
            let spec = layout.tensor(*t);
            rect.row_segments(spec.cols)
                .map(move |seg| spec.offset + seg.start..spec.offset + seg.end)
        })
    }

    pub fn iter_ids<'a>(&'a self, layout: &'a ParamLayout) -> impl Iterator<Item = ParamId> + 'a {
        self.flat_segments(layout).flat_map(|r| r.map(ParamId))
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}
