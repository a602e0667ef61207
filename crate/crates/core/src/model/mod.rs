//! Decoder-only transformer with an explicit forward pass and a partial
//! backward pass.
//!
//! The backward pass always propagates the complete input Jacobian through
//! every layer, but materializes parameter gradients only for the requested
//! trainable set. Optional detach modes drop frozen MLP slices from the input
//! Jacobian as well.

mod config;
mod grad;
mod layout;
pub mod mlp;

pub use config::{ModelConfig, PositionalEncoding};
pub use grad::GradientBuffer;
pub use layout::{IndexSet, ParamId, ParamLayout, Rect, TensorKind, TensorSpec};

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_partial_k, matmul_tn_block, transpose, Mat};

const LN_EPS: f64 = 1e-5;

/// How the MLP input Jacobian treats frozen slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackwardMode {
    /// All slices contribute to `∂L/∂X`.
    #[default]
    FullJacobian,
    /// Only the node's own slice contributes.
    DetachAllButK,
    /// The node's slice plus one other slice drawn uniformly every step.
    DetachKPlusRandom,
}

/// Concrete MLP Jacobian routing for one backward call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JacobianPlan {
    Full,
    /// Keep only these slice indices (out of `num_slices`) in `∂L/∂X`.
    Keep { num_slices: usize, slices: Vec<usize> },
}

impl JacobianPlan {
    /// Resolves a [`BackwardMode`] for the node owning slice `own`.
    /// `extra` is the randomly drawn second slice for `DetachKPlusRandom`.
    pub fn resolve(
        mode: BackwardMode,
        num_slices: usize,
        own: usize,
        extra: Option<usize>,
    ) -> Result<Self> {
        match mode {
            BackwardMode::FullJacobian => Ok(JacobianPlan::Full),
            _ if num_slices < 2 => Err(Error::config(
                "run.backward_mode",
                "detach modes need at least two MLP slices (num_slices >= 2)",
            )),
            BackwardMode::DetachAllButK => Ok(JacobianPlan::Keep {
                num_slices,
                slices: vec![own],
            }),
            BackwardMode::DetachKPlusRandom => {
                let g = extra.ok_or_else(|| {
                    Error::Contract("detach-k-plus-random needs a sampled slice".into())
                })?;
                if g == own || g >= num_slices {
                    return Err(Error::Contract(format!(
                        "random slice {g} must differ from own slice {own} and be < {num_slices}"
                    )));
                }
                let mut slices = vec![own, g];
                slices.sort_unstable();
                Ok(JacobianPlan::Keep { num_slices, slices })
            }
        }
    }

    fn kept_ranges(&self, ffn_dim: usize) -> Vec<Range<usize>> {
        match self {
            JacobianPlan::Full => vec![0..ffn_dim],
            JacobianPlan::Keep { num_slices, slices } => slices
                .iter()
                .map(|&n| mlp::slice_range(ffn_dim, *num_slices, n))
                .collect(),
        }
    }
}

/// Flat parameter vector θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
        }
    }

    /// Gaussian init (std `std`) for embeddings and matrices; unit gains and
    /// zero biases for layer norms.
    pub fn init(layout: &ParamLayout, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut values = vec![0.0; layout.len()];
        for spec in layout.tensors() {
            let slot = &mut values[spec.range()];
            match spec.kind {
                TensorKind::Ln1Gain | TensorKind::Ln2Gain | TensorKind::FinalLnGain => {
                    slot.fill(1.0)
                }
                TensorKind::Ln1Bias | TensorKind::Ln2Bias | TensorKind::FinalLnBias => {
                    slot.fill(0.0)
                }
                _ => slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
            }
        }
        Self { values }
    }

    pub fn tensor<'a>(&'a self, spec: &TensorSpec) -> &'a [f64] {
        &self.values[spec.range()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    xn1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention probabilities, `[batch][head][t][u]` with zeros above the
    /// diagonal.
    probs: Vec<f64>,
    u: Mat,
    ln2: LnCache,
    xn2: Mat,
    hpre: Mat,
    act: Mat,
}

/// Every intermediate the backward pass needs (no recomputation).
#[derive(Debug, Clone)]
pub struct ActivationCache {
    batch: usize,
    seq: usize,
    inputs: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    xf: Mat,
}

impl ActivationCache {
    pub fn num_positions(&self) -> usize {
        self.batch * self.seq
    }
}

/// The model: a shape plus its parameter layout. Weights are passed in
/// separately so one model can serve many replicas.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    layout: ParamLayout,
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, LnCache) {
    let d = x.cols;
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xh[c] * gain[c] + bias[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
fn layer_norm_backward(dy: &Mat, cache: &LnCache, gain: &[f64]) -> (Mat, Vec<f64>, Vec<f64>) {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dgain[c] += g[c] * xh[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = cache.rstd[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

fn add_assign(a: &mut Mat, b: &Mat) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

/// Result of the MLP block backward.
#[derive(Debug, Clone)]
pub struct MlpBackward {
    /// `∂L/∂X` routed through the kept slices.
    pub dx: Mat,
    /// Gradient blocks of the up-projection, one per requested rectangle.
    pub d_up: Vec<Mat>,
    /// Gradient blocks of the down-projection, one per requested rectangle.
    pub d_down: Vec<Mat>,
}

/// Backward through `Y = relu(X·W_up)·W_down` given cached pre-activations
/// `hpre` and activations `act`.
///
/// `up_rects` and `down_rects` select which parameter-gradient blocks to
/// form; `kept` lists the hidden-unit ranges that feed the input Jacobian.
#[allow(clippy::too_many_arguments)]
pub fn mlp_backward(
    x: &Mat,
    up: &Mat,
    down: &Mat,
    hpre: &Mat,
    act: &Mat,
    g: &Mat,
    up_rects: &[Rect],
    down_rects: &[Rect],
    kept: &[Range<usize>],
) -> MlpBackward {
    let m = x.rows;
    let d = x.cols;
    let f = up.cols;
    // ∂L/∂W_down = Aᵀ G (restricted).
    let d_down = down_rects
        .iter()
        .map(|r| matmul_tn_block(&act.data, &g.data, m, f, d, r.rows.clone(), r.cols.clone()))
        .collect();
    // ∂L/∂A = G W_downᵀ, then through the ReLU mask.
    let down_t = down.transpose();
    let mut dh = matmul(&g.data, &down_t.data, m, d, f);
    for (v, h) in dh.data.iter_mut().zip(&hpre.data) {
        if *h <= 0.0 {
            *v = 0.0;
        }
    }
    // ∂L/∂W_up = Xᵀ ∂L/∂H (restricted).
    let d_up = up_rects
        .iter()
        .map(|r| matmul_tn_block(&x.data, &dh.data, m, d, f, r.rows.clone(), r.cols.clone()))
        .collect();
    // ∂L/∂X = Σ over kept slices of ∂L/∂Hₙ W_upₙᵀ.
    let up_t = up.transpose();
    let dx = matmul_partial_k(&dh.data, &up_t.data, m, f, d, kept);
    MlpBackward { dx, d_up, d_down }
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn weight(&self, params: &ModelParams, kind: TensorKind, layer: Option<usize>) -> Mat {
        let spec = self.layout.spec(kind, layer);
        Mat::from_slice(spec.rows, spec.cols, params.tensor(spec))
    }

    fn vector<'a>(
        &self,
        params: &'a ModelParams,
        kind: TensorKind,
        layer: Option<usize>,
    ) -> &'a [f64] {
        params.tensor(self.layout.spec(kind, layer))
    }

    /// Runs the forward pass on the batch inputs. Logits are `(B·S_in) × V`
    /// with rows ordered batch-major.
    pub fn forward(&self, params: &ModelParams, batch: &TokenBatch) -> Result<(Mat, ActivationCache)> {
        self.forward_tokens(params, batch.batch_size(), &batch.inputs())
    }

    /// Forward over `batch` sequences of equal length laid out in `inputs`.
    pub fn forward_tokens(
        &self,
        params: &ModelParams,
        batch: usize,
        inputs: &[u32],
    ) -> Result<(Mat, ActivationCache)> {
        let cfg = &self.config;
        if params.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, layout needs {}",
                params.len(),
                self.layout.len()
            )));
        }
        if batch == 0 || inputs.len() % batch != 0 {
            return Err(Error::Shape(format!(
                "{} tokens do not split into {batch} sequences",
                inputs.len()
            )));
        }
        let seq = inputs.len() / batch;
        if seq == 0 || seq > cfg.seq_len {
            return Err(Error::config(
                "batch",
                format!("sequence length {seq} must be in 1..={}", cfg.seq_len),
            ));
        }
        if let Some(t) = inputs.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::config(
                "batch",
                format!("token id {t} must be < vocab_size {}", cfg.vocab_size),
            ));
        }
        let d = cfg.hidden_dim;
        let m = batch * seq;
        let h = cfg.num_heads;
        let dh = cfg.head_dim;
        let a = cfg.attn_dim();
        let f = cfg.ffn_dim;
        let scale = 1.0 / (dh as f64).sqrt();

        let emb = self.vector(params, TensorKind::TokenEmbedding, None);
        let pos = self.vector(params, TensorKind::PositionEmbedding, None);
        let mut x = Mat::zeros(m, d);
        for (t, &tok) in inputs.iter().enumerate() {
            let p = t % seq;
            let row = x.row_mut(t);
            let e = &emb[tok as usize * d..(tok as usize + 1) * d];
            let pe = &pos[p * d..(p + 1) * d];
            for c in 0..d {
                row[c] = e[c] + pe[c];
            }
        }

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let (xn1, ln1) = layer_norm(
                &x,
                self.vector(params, TensorKind::Ln1Gain, Some(l)),
                self.vector(params, TensorKind::Ln1Bias, Some(l)),
            );
            let q = matmul(&xn1.data, self.vector(params, TensorKind::Query, Some(l)), m, d, a);
            let k = matmul(&xn1.data, self.vector(params, TensorKind::Key, Some(l)), m, d, a);
            let v = matmul(&xn1.data, self.vector(params, TensorKind::Value, Some(l)), m, d, a);

            let mut probs = vec![0.0; batch * h * seq * seq];
            let mut u = Mat::zeros(m, a);
            for b in 0..batch {
                for j in 0..h {
                    let hc = j * dh..(j + 1) * dh;
                    let base = (b * h + j) * seq * seq;
                    for t in 0..seq {
                        let qt = &q.row(b * seq + t)[hc.clone()];
                        let prow = &mut probs[base + t * seq..base + (t + 1) * seq];
                        let mut max = f64::NEG_INFINITY;
                        for s in 0..=t {
                            let ks = &k.row(b * seq + s)[hc.clone()];
                            let score = qt.iter().zip(ks).map(|(x, y)| x * y).sum::<f64>() * scale;
                            prow[s] = score;
                            max = max.max(score);
                        }
                        let mut z = 0.0;
                        for p in prow.iter_mut().take(t + 1) {
                            *p = (*p - max).exp();
                            z += *p;
                        }
                        for p in prow.iter_mut().take(t + 1) {
                            *p /= z;
                        }
                        let ut = &mut u.row_mut(b * seq + t)[hc.clone()];
                        for s in 0..=t {
                            let w = prow[s];
                            let vs = &v.row(b * seq + s)[hc.clone()];
                            for (o, vv) in ut.iter_mut().zip(vs) {
                                *o += w * vv;
                            }
                        }
                    }
                }
            }
            let attn_out = matmul(&u.data, self.vector(params, TensorKind::AttnOut, Some(l)), m, a, d);
            let mut x_mid = x.clone();
            add_assign(&mut x_mid, &attn_out);
            if !x_mid.all_finite() {
                return Err(Error::NumericalOverflow { layer: l, stage: "attention" });
            }

            let (xn2, ln2) = layer_norm(
                &x_mid,
                self.vector(params, TensorKind::Ln2Gain, Some(l)),
                self.vector(params, TensorKind::Ln2Bias, Some(l)),
            );
            let hpre = matmul(&xn2.data, self.vector(params, TensorKind::MlpUp, Some(l)), m, d, f);
            let mut act = hpre.clone();
            mlp::relu_in_place(&mut act);
            let y = matmul(&act.data, self.vector(params, TensorKind::MlpDown, Some(l)), m, f, d);
            let mut x_out = x_mid;
            add_assign(&mut x_out, &y);
            if !x_out.all_finite() {
                return Err(Error::NumericalOverflow { layer: l, stage: "mlp" });
            }

            layers.push(LayerCache {
                ln1,
                xn1,
                q,
                k,
                v,
                probs,
                u,
                ln2,
                xn2,
                hpre,
                act,
            });
            x = x_out;
        }

        let (xf, lnf) = layer_norm(
            &x,
            self.vector(params, TensorKind::FinalLnGain, None),
            self.vector(params, TensorKind::FinalLnBias, None),
        );
        // Tied head: logits = xf · Eᵀ.
        let emb_t = transpose(emb, cfg.vocab_size, d);
        let logits = matmul(&xf.data, &emb_t.data, m, d, cfg.vocab_size);
        if !logits.all_finite() {
            return Err(Error::NumericalOverflow {
                layer: cfg.num_layers,
                stage: "output head",
            });
        }
        Ok((
            logits,
            ActivationCache {
                batch,
                seq,
                inputs: inputs.to_vec(),
                layers,
                lnf,
                xf,
            },
        ))
    }

    /// Mean next-token loss of `params` on `batch`.
    pub fn loss(&self, params: &ModelParams, batch: &TokenBatch) -> Result<f64> {
        let (logits, _) = self.forward(params, batch)?;
        Ok(cross_entropy_loss(&logits, &batch.targets())?.0)
    }

    /// Forward, loss and partial backward in one call.
    pub fn loss_and_grad(
        &self,
        params: &ModelParams,
        batch: &TokenBatch,
        trainable: &IndexSet,
        jacobian: &JacobianPlan,
    ) -> Result<(f64, GradientBuffer)> {
        let (logits, cache) = self.forward(params, batch)?;
        let (loss, dlogits) = cross_entropy_loss(&logits, &batch.targets())?;
        let grads = self.backward_partial(params, &cache, &dlogits, trainable, jacobian)?;
        Ok((loss, grads))
    }

    /// Backward pass producing gradients for exactly `trainable`.
    pub fn backward_partial(
        &self,
        params: &ModelParams,
        cache: &ActivationCache,
        dlogits: &Mat,
        trainable: &IndexSet,
        jacobian: &JacobianPlan,
    ) -> Result<GradientBuffer> {
        let cfg = &self.config;
        let layout = &self.layout;
        let (batch, seq) = (cache.batch, cache.seq);
        let m = batch * seq;
        let d = cfg.hidden_dim;
        let h = cfg.num_heads;
        let dh = cfg.head_dim;
        let a = cfg.attn_dim();
        let f = cfg.ffn_dim;
        let v_size = cfg.vocab_size;
        let scale = 1.0 / (dh as f64).sqrt();
        if dlogits.rows != m || dlogits.cols != v_size {
            return Err(Error::Shape(format!(
                "dlogits is {}x{}, expected {m}x{v_size}",
                dlogits.rows, dlogits.cols
            )));
        }
        if let JacobianPlan::Keep { num_slices, slices } = jacobian {
            if *num_slices == 0 || f % num_slices != 0 || slices.iter().any(|s| s >= num_slices) {
                return Err(Error::config(
                    "run.backward_mode",
                    format!("invalid kept slices {slices:?} for {num_slices} slices"),
                ));
            }
        }
        let kept = jacobian.kept_ranges(f);

        let mut out = GradientBuffer::zeros(trainable.clone());
        // entry indices per tensor
        let mut entries_of: Vec<Vec<usize>> = vec![Vec::new(); layout.tensors().len()];
        for (e, (t, _)) in trainable.entries().iter().enumerate() {
            entries_of[*t].push(e);
        }
        let rects_of = |t: usize| -> Vec<Rect> {
            entries_of[t]
                .iter()
                .map(|&e| trainable.entries()[e].1.clone())
                .collect()
        };
        // Writes restricted blocks for tensor `t`.
        let store_blocks = |out: &mut GradientBuffer, t: usize, blocks: Vec<Mat>| {
            for (&e, b) in entries_of[t].iter().zip(blocks) {
                out.blocks_mut()[e] = b.data;
            }
        };
        // Copies rectangles out of a dense tensor gradient.
        let store_dense = |out: &mut GradientBuffer, t: usize, dense: &[f64]| {
            let cols = layout.tensor(t).cols;
            for &e in &entries_of[t] {
                let rect = &trainable.entries()[e].1;
                let block = &mut out.blocks_mut()[e];
                let mut i = 0;
                for seg in rect.row_segments(cols) {
                    let n = seg.len();
                    block[i..i + n].copy_from_slice(&dense[seg]);
                    i += n;
                }
            }
        };

        let emb_idx = layout.index_of(TensorKind::TokenEmbedding, None);
        let emb = self.vector(params, TensorKind::TokenEmbedding, None);
        let mut d_emb_dense = trainable
            .touches(emb_idx)
            .then(|| vec![0.0; v_size * d]);
        // Head: dE += dlogitsᵀ · xf.
        if let Some(dense) = d_emb_dense.as_mut() {
            let g = matmul_tn_block(&dlogits.data, &cache.xf.data, m, v_size, d, 0..v_size, 0..d);
            dense.copy_from_slice(&g.data);
        }
        let mut dx = matmul(&dlogits.data, emb, m, v_size, d);

        let lnf_g = layout.index_of(TensorKind::FinalLnGain, None);
        let (dxf, dg, db) =
            layer_norm_backward(&dx, &cache.lnf, self.vector(params, TensorKind::FinalLnGain, None));
        store_dense(&mut out, lnf_g, &dg);
        store_dense(&mut out, lnf_g + 1, &db);
        dx = dxf;

        for l in (0..cfg.num_layers).rev() {
            let c = &cache.layers[l];
            let idx = |k: TensorKind| layout.index_of(k, Some(l));

            // MLP block: x_out = x_mid + MLP(LN2(x_mid)).
            let up = self.weight(params, TensorKind::MlpUp, Some(l));
            let down = self.weight(params, TensorKind::MlpDown, Some(l));
            let mb = mlp_backward(
                &c.xn2,
                &up,
                &down,
                &c.hpre,
                &c.act,
                &dx,
                &rects_of(idx(TensorKind::MlpUp)),
                &rects_of(idx(TensorKind::MlpDown)),
                &kept,
            );
            store_blocks(&mut out, idx(TensorKind::MlpUp), mb.d_up);
            store_blocks(&mut out, idx(TensorKind::MlpDown), mb.d_down);
            let (dxm, dg, db) =
                layer_norm_backward(&mb.dx, &c.ln2, self.vector(params, TensorKind::Ln2Gain, Some(l)));
            store_dense(&mut out, idx(TensorKind::Ln2Gain), &dg);
            store_dense(&mut out, idx(TensorKind::Ln2Bias), &db);
            add_assign(&mut dx, &dxm);

            // Attention block: x_mid = x_in + Attn(LN1(x_in)).
            let wo_i = idx(TensorKind::AttnOut);
            let blocks = rects_of(wo_i)
                .iter()
                .map(|r| matmul_tn_block(&c.u.data, &dx.data, m, a, d, r.rows.clone(), r.cols.clone()))
                .collect();
            store_blocks(&mut out, wo_i, blocks);
            let wo_t = transpose(self.vector(params, TensorKind::AttnOut, Some(l)), a, d);
            let du = matmul(&dx.data, &wo_t.data, m, d, a);

            let mut dq = Mat::zeros(m, a);
            let mut dk = Mat::zeros(m, a);
            let mut dv = Mat::zeros(m, a);
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for j in 0..h {
                    let hc = j * dh..(j + 1) * dh;
                    let base = (b * h + j) * seq * seq;
                    for t in 0..seq {
                        let prow = &c.probs[base + t * seq..base + (t + 1) * seq];
                        let dut = &du.row(b * seq + t)[hc.clone()];
                        // ∂L/∂P and ∂L/∂V.
                        let mut dot = 0.0;
                        for s in 0..=t {
                            let vs = &c.v.row(b * seq + s)[hc.clone()];
                            dp[s] = dut.iter().zip(vs).map(|(x, y)| x * y).sum::<f64>();
                            dot += dp[s] * prow[s];
                            let w = prow[s];
                            let dvs = &mut dv.row_mut(b * seq + s)[hc.clone()];
                            for (o, g) in dvs.iter_mut().zip(dut) {
                                *o += w * g;
                            }
                        }
                        // Softmax backward, then into Q and K.
                        for s in 0..=t {
                            let ds = prow[s] * (dp[s] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let ks = &c.k.row(b * seq + s)[hc.clone()];
                            let dqt = &mut dq.row_mut(b * seq + t)[hc.clone()];
                            for (o, kv) in dqt.iter_mut().zip(ks) {
                                *o += ds * kv;
                            }
                            let qt = &c.q.row(b * seq + t)[hc.clone()];
                            let dks = &mut dk.row_mut(b * seq + s)[hc.clone()];
                            for (o, qv) in dks.iter_mut().zip(qt) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
            }

            let mut dxn1 = Mat::zeros(m, d);
            for (kind, dproj) in [
                (TensorKind::Query, &dq),
                (TensorKind::Key, &dk),
                (TensorKind::Value, &dv),
            ] {
                let t = idx(kind);
                let blocks = rects_of(t)
                    .iter()
                    .map(|r| {
                        matmul_tn_block(&c.xn1.data, &dproj.data, m, d, a, r.rows.clone(), r.cols.clone())
                    })
                    .collect();
                store_blocks(&mut out, t, blocks);
                // Input Jacobian always sums over every head.
                let w_t = transpose(self.vector(params, kind, Some(l)), d, a);
                add_assign(&mut dxn1, &matmul(&dproj.data, &w_t.data, m, a, d));
            }
            let (dxi, dg, db) =
                layer_norm_backward(&dxn1, &c.ln1, self.vector(params, TensorKind::Ln1Gain, Some(l)));
            store_dense(&mut out, idx(TensorKind::Ln1Gain), &dg);
            store_dense(&mut out, idx(TensorKind::Ln1Bias), &db);
            add_assign(&mut dx, &dxi);
        }

        // Embedding lookups.
        let pos_idx = layout.index_of(TensorKind::PositionEmbedding, None);
        if trainable.touches(pos_idx) {
            let mut dpos = vec![0.0; cfg.seq_len * d];
            for t in 0..m {
                let p = t % seq;
                for (o, g) in dpos[p * d..(p + 1) * d].iter_mut().zip(dx.row(t)) {
                    *o += g;
                }
            }
            store_dense(&mut out, pos_idx, &dpos);
        }
        if let Some(mut dense) = d_emb_dense {
            for (t, &tok) in cache.inputs.iter().enumerate() {
                let tok = tok as usize;
                for (o, g) in dense[tok * d..(tok + 1) * d].iter_mut().zip(dx.row(t)) {
                    *o += g;
                }
            }
            store_dense(&mut out, emb_idx, &dense);
        }
        Ok(out)
    }
}

/// Mean cross-entropy over all rows of `logits` and `∂loss/∂logits`
/// (`(softmax − onehot) / rows`).
pub fn cross_entropy_loss(logits: &Mat, targets: &[u32]) -> Result<(f64, Mat)> {
    if logits.rows != targets.len() || logits.rows == 0 {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} targets",
            logits.rows,
            targets.len()
        )));
    }
    let n = logits.rows as f64;
    let mut total = 0.0;
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    for (r, &tgt) in targets.iter().enumerate() {
        let tgt = tgt as usize;
        if tgt >= logits.cols {
            return Err(Error::Shape(format!("target {tgt} >= vocab {}", logits.cols)));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[tgt];
        let out = dlogits.row_mut(r);
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - lse).exp() / n;
        }
        out[tgt] -= 1.0 / n;
    }
    Ok((total / n, dlogits))
}

#[cfg(test)]
mod tests;
