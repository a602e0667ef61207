//! Simulated multi-node training: partial updates, DiLoCo and DDP.
//!
//! All K nodes live in one process. Local steps of different nodes run on a
//! rayon pool; every reduction walks nodes in ascending order on one thread,
//! so results do not depend on the worker count.

pub mod checkpoint;
mod config;
mod metrics;

pub use config::{Algorithm, LrConfig, RunConfig, SimClock};
pub use metrics::{MetricRow, RoundSummary, RowSource, RunMetrics, CSV_HEADER};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::costmodel::{self, CommConfig, FlopsConfig};
use crate::data::{next_batch, shard, Corpus, Cursor, ShardView, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{
    cross_entropy_loss, BackwardMode, GradientBuffer, IndexSet, JacobianPlan, ModelConfig,
    ModelParams, ParamLayout, Transformer,
};
use crate::optim::{inner_step, outer_step_on, InnerOptState, LrSchedule, OuterOptState};
use crate::slicing::{build_slice_plan, build_sync_schedule, SlicePlan, SyncSchedule};

/// Everything one simulated node owns.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    /// Slice index `k mod N`.
    pub slice: usize,
    /// Local replica θ_k (unused by DDP, which steps the global model).
    pub params: ModelParams,
    pub trainable: IndexSet,
    /// Inner optimizer state; `None` for DDP nodes.
    pub opt: Option<InnerOptState>,
    pub shard: ShardView,
    pub cursor: Cursor,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub perplexity: f64,
}

/// Mean next-token loss of `params` over every sequence of `eval`, and its
/// exponential.
pub fn evaluate(
    model: &Transformer,
    params: &ModelParams,
    eval: &Corpus,
    batch_size: usize,
) -> Result<EvalResult> {
    if eval.num_sequences() == 0 || batch_size == 0 {
        return Err(Error::config("data.eval_sequences", "evaluation needs at least one sequence"));
    }
    let chunks: Vec<(usize, usize)> = (0..eval.num_sequences())
        .step_by(batch_size)
        .map(|s| (s, (s + batch_size).min(eval.num_sequences())))
        .collect();
    let parts: Vec<Result<(f64, usize)>> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let s = eval.seq_len;
            let batch = TokenBatch::new(b - a, s, eval.tokens()[a * s..b * s].to_vec())?;
            let (logits, _) = model.forward(params, &batch)?;
            let (loss, _) = cross_entropy_loss(&logits, &batch.targets())?;
            Ok((loss * batch.num_targets() as f64, batch.num_targets()))
        })
        .collect();
    let (mut nll, mut n) = (0.0, 0usize);
    for p in parts {
        let (l, c) = p?;
        nll += l;
        n += c;
    }
    let loss = nll / n as f64;
    Ok(EvalResult {
        loss,
        perplexity: loss.exp(),
    })
}

/// `Δ[i] = (1/m[i]) Σ_k Δ_k[i]`, summed in ascending node order. Indices no
/// node touched stay zero.
pub fn simulated_all_reduce(
    layout: &ParamLayout,
    deltas: &[GradientBuffer],
    supports: &[&IndexSet],
    counts: &[u32],
) -> Result<Vec<f64>> {
    if deltas.len() != supports.len() {
        return Err(Error::Shape(format!(
            "{} deltas but {} supports",
            deltas.len(),
            supports.len()
        )));
    }
    if counts.len() != layout.len() {
        return Err(Error::Shape(format!(
            "count vector has {} entries, layout needs {}",
            counts.len(),
            layout.len()
        )));
    }
    let mut sum = vec![0.0; layout.len()];
    let mut touched = vec![false; layout.len()];
    for (k, (delta, support)) in deltas.iter().zip(supports).enumerate() {
        let cov = delta.coverage();
        if cov.intersect(support).len() != cov.len() {
            return Err(Error::Contract(format!(
                "delta of node {k} has entries outside its trainable set"
            )));
        }
        for ((t, rect), block) in cov.entries().iter().zip(delta.blocks()) {
            let spec = layout.tensor(*t);
            let mut j = 0;
            for seg in rect.row_segments(spec.cols) {
                for i in spec.offset + seg.start..spec.offset + seg.end {
                    sum[i] += block[j];
                    touched[i] = true;
                    j += 1;
                }
            }
        }
    }
    for i in 0..sum.len() {
        if touched[i] {
            if counts[i] == 0 {
                return Err(Error::Contract(format!("index {i} touched but its count is zero")));
            }
            sum[i] /= counts[i] as f64;
        }
    }
    Ok(sum)
}

/// `θ_k − θ` on `set`, as a buffer covering exactly `set`.
fn node_delta(layout: &ParamLayout, node: &ModelParams, global: &ModelParams, set: &IndexSet) -> GradientBuffer {
    let mut out = GradientBuffer::zeros(set.clone());
    for ((t, rect), block) in set.entries().iter().zip(out.blocks_mut()) {
        let spec = layout.tensor(*t);
        let mut j = 0;
        for seg in rect.row_segments(spec.cols) {
            for i in spec.offset + seg.start..spec.offset + seg.end {
                block[j] = node.values[i] - global.values[i];
                j += 1;
            }
        }
    }
    out
}

fn divergence(round: usize, step: usize, node: usize, loss: f64) -> Error {
    Error::Divergence {
        round,
        step,
        who: format!("node {node}"),
        loss,
    }
}

pub struct Trainer {
    model: Transformer,
    run: RunConfig,
    plan: Option<SlicePlan>,
    schedule: Option<SyncSchedule>,
    /// `[group][node]`: the node's trainable indices inside the group.
    group_sets: Vec<Vec<IndexSet>>,
    counts: Vec<u32>,
    full: IndexSet,
    lr: LrSchedule,
    train: Arc<Corpus>,
    eval: Arc<Corpus>,
    global: ModelParams,
    outer: OuterOptState,
    ddp_opt: Option<InnerOptState>,
    nodes: Vec<NodeState>,
    step: usize,
    tokens: u64,
    sim_comm_s: f64,
    sim_comp_s: f64,
    comp_per_step_s: f64,
    metrics: RunMetrics,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// Builds a fresh run. `threads == 0` uses every available core.
    pub fn new(
        model_cfg: ModelConfig,
        run: RunConfig,
        train: Arc<Corpus>,
        eval: Arc<Corpus>,
        threads: usize,
    ) -> Result<Self> {
        model_cfg.validate()?;
        run.validate(&model_cfg)?;
        for (name, c) in [("train", &train), ("eval", &eval)] {
            if c.vocab_size != model_cfg.vocab_size || c.seq_len > model_cfg.seq_len + 1 || c.seq_len < 2 {
                return Err(Error::config(
                    "data",
                    format!(
                        "{name} corpus (V = {}, S = {}) does not fit the model (V = {}, context {})",
                        c.vocab_size, c.seq_len, model_cfg.vocab_size, model_cfg.seq_len
                    ),
                ));
            }
        }
        let model = Transformer::new(model_cfg.clone())?;
        let layout = model.layout().clone();
        let full = IndexSet::full(&layout);
        let k = run.num_nodes;

        let plan = match run.algorithm {
            Algorithm::PartialUpdates => Some(build_slice_plan(
                &model_cfg,
                k,
                run.num_slices,
                run.slice_strategy,
            )?),
            _ => None,
        };
        let schedule = match run.algorithm {
            Algorithm::Ddp => None,
            _ => Some(build_sync_schedule(&model_cfg, run.sync, run.local_steps)?),
        };
        let trainable_of = |node: usize| -> IndexSet {
            match &plan {
                Some(p) => p.trainable(node).clone(),
                None => full.clone(),
            }
        };
        let group_sets = schedule
            .as_ref()
            .map(|s| {
                s.groups
                    .iter()
                    .map(|g| (0..k).map(|n| trainable_of(n).intersect(&g.params)).collect())
                    .collect()
            })
            .unwrap_or_default();
        let counts = match &plan {
            Some(p) => p.count_vector(),
            None => vec![k as u32; layout.len()],
        };

        let global = ModelParams::init(&layout, run.seed, run.init_std);
        let mut nodes = Vec::with_capacity(k);
        for id in 0..k {
            let trainable = trainable_of(id);
            let opt = match run.algorithm {
                Algorithm::Ddp => None,
                _ => Some(InnerOptState::new(run.inner, trainable.clone(), &layout)),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x6e6f_6465_7267);
            rng.set_stream(id as u64);
            nodes.push(NodeState {
                id,
                slice: plan.as_ref().map_or(0, |p| p.slice_of(id)),
                params: global.clone(),
                trainable,
                opt,
                shard: shard(&train, k, id)?,
                cursor: Cursor::default(),
                rng,
            });
        }
        let ddp_opt = match run.algorithm {
            Algorithm::Ddp => Some(InnerOptState::new(run.inner, full.clone(), &layout)),
            _ => None,
        };

        let (rho_mlp, rho_attn) = match &plan {
            Some(p) => {
                let f = p.trainable_fraction();
                (f.rho_mlp, f.rho_attn)
            }
            None => (1.0, 1.0),
        };
        let flops = FlopsConfig::from_model(&model_cfg, run.per_node_batch, rho_mlp, rho_attn);
        let comp_per_step_s = (costmodel::forward_flops(&flops).total
            + costmodel::backward_flops(&flops).total)
            / run.sim.flops_per_second;

        let mut builder = rayon::ThreadPoolBuilder::new();
        if threads > 0 {
            builder = builder.num_threads(threads);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?;

        Ok(Self {
            lr: run.inner_lr.schedule(run.total_steps()),
            outer: OuterOptState::new(run.outer, layout.len()),
            model,
            plan,
            schedule,
            group_sets,
            counts,
            full,
            train,
            eval,
            global,
            ddp_opt,
            nodes,
            step: 0,
            tokens: 0,
            sim_comm_s: 0.0,
            sim_comp_s: 0.0,
            comp_per_step_s,
            metrics: RunMetrics::default(),
            pool,
            run,
        })
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    pub fn plan(&self) -> Option<&SlicePlan> {
        self.plan.as_ref()
    }

    pub fn schedule(&self) -> Option<&SyncSchedule> {
        self.schedule.as_ref()
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn outer_state(&self) -> &OuterOptState {
        &self.outer
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn completed_steps(&self) -> usize {
        self.step
    }

    pub fn completed_rounds(&self) -> usize {
        self.step / self.run.local_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.run.total_steps()
    }

    pub fn train_corpus(&self) -> &Corpus {
        &self.train
    }

    /// Evaluates the current global model on the held-out set.
    pub fn evaluate_global(&self) -> Result<EvalResult> {
        self.pool
            .install(|| evaluate(&self.model, &self.global, &self.eval, self.run.eval_batch_size))
    }

    /// Runs to the end of the configured schedule.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step_once()?;
        }
        Ok(())
    }

    /// Runs until `n` more rounds have completed (or the run ends).
    pub fn run_rounds(&mut self, n: usize) -> Result<()> {
        let target = ((self.completed_rounds() + n) * self.run.local_steps).min(self.run.total_steps());
        while self.step < target {
            self.step_once()?;
        }
        Ok(())
    }

    /// One local step on every node, followed by whatever synchronization
    /// and evaluation is due.
    pub fn step_once(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::Contract("run already finished".into()));
        }
        let c = self.step + 1;
        let h = self.run.local_steps;
        let round = (c - 1) / h;
        let lr = self.lr.lr(self.step);

        let losses = match self.run.algorithm {
            Algorithm::Ddp => self.ddp_step(round, c, lr)?,
            _ => {
                let losses = self.local_steps(round, c, lr)?;
                let due = self.schedule.as_ref().expect("schedule").due(c);
                for g in due {
                    self.sync_group(g)?;
                }
                losses
            }
        };

        self.sim_comp_s += self.comp_per_step_s;
        self.tokens += (self.run.num_nodes * self.run.per_node_batch * self.train.seq_len) as u64;
        for (k, &loss) in losses.iter().enumerate() {
            self.metrics.rows.push(MetricRow {
                round,
                step: c,
                node: RowSource::Node(k),
                loss,
                tokens: self.tokens,
                sim_comm_s: self.sim_comm_s,
                sim_comp_s: self.sim_comp_s,
            });
        }
        self.step = c;

        if c % h == 0 {
            if self.run.reset_inner_state {
                for n in &mut self.nodes {
                    if let Some(o) = n.opt.as_mut() {
                        o.reset();
                    }
                }
            }
            self.end_round(round)?;
        }
        Ok(())
    }

    fn end_round(&mut self, round: usize) -> Result<()> {
        let ev = self.evaluate_global()?;
        if !ev.loss.is_finite() || ev.loss > self.run.divergence_threshold {
            return Err(Error::Divergence {
                round,
                step: self.step,
                who: "eval".into(),
                loss: ev.loss,
            });
        }
        let train: Vec<f64> = self
            .metrics
            .rows
            .iter()
            .rev()
            .take_while(|r| r.round == round)
            .filter(|r| matches!(r.node, RowSource::Node(_)))
            .map(|r| r.loss)
            .collect();
        self.metrics.rows.push(MetricRow {
            round,
            step: self.step,
            node: RowSource::Eval,
            loss: ev.loss,
            tokens: self.tokens,
            sim_comm_s: self.sim_comm_s,
            sim_comp_s: self.sim_comp_s,
        });
        self.metrics.rounds.push(RoundSummary {
            round,
            mean_train_loss: train.iter().rev().sum::<f64>() / train.len() as f64,
            eval_loss: ev.loss,
            eval_perplexity: ev.perplexity,
            tokens: self.tokens,
            sim_comm_s: self.sim_comm_s,
            sim_comp_s: self.sim_comp_s,
        });
        Ok(())
    }

    fn comm_seconds(&self, num_params: usize) -> f64 {
        costmodel::comm_time(&CommConfig {
            payload_bytes: num_params as f64 * self.run.sim.wire_bytes_per_param,
            num_nodes: self.run.num_nodes,
            bandwidth: self.run.sim.bandwidth,
            sync_period: 1,
            step_compute_s: self.comp_per_step_s,
            groups: 1,
        })
    }

    /// Every node: one batch, partial backward, inner step on θ_k.
    fn local_steps(&mut self, round: usize, c: usize, lr: f64) -> Result<Vec<f64>> {
        let model = &self.model;
        let train = &self.train;
        let run = &self.run;
        let num_slices = run.num_slices;
        let data_seed = run.data_seed();
        let results: Vec<Result<f64>> = self.pool.install(|| {
            self.nodes
                .par_iter_mut()
                .map(|node| {
                    let batch = next_batch(train, &node.shard, run.per_node_batch, &mut node.cursor, data_seed)?;
                    let extra = match run.backward_mode {
                        BackwardMode::DetachKPlusRandom => {
                            let r = node.rng.random_range(0..num_slices - 1);
                            Some(if r >= node.slice { r + 1 } else { r })
                        }
                        _ => None,
                    };
                    let plan = JacobianPlan::resolve(run.backward_mode, num_slices, node.slice, extra)?;
                    let (loss, grads) = match model.loss_and_grad(&node.params, &batch, &node.trainable, &plan) {
                        Ok(v) => v,
                        Err(Error::NumericalOverflow { layer, stage }) => {
                            return Err(Error::Divergence {
                                round,
                                step: c,
                                who: format!("node {} (non-finite {stage} output in layer {layer})", node.id),
                                loss: f64::NAN,
                            })
                        }
                        Err(e) => return Err(e),
                    };
                    if !loss.is_finite() || loss > run.divergence_threshold {
                        return Err(divergence(round, c, node.id, loss));
                    }
                    let layout = model.layout();
                    inner_step(&mut node.params, layout, &grads, node.opt.as_mut().expect("inner state"), lr)?;
                    Ok(loss)
                })
                .collect()
        });
        results.into_iter().collect()
    }

    /// Reduce and outer-step group `g`, then reset every replica on it.
    fn sync_group(&mut self, g: usize) -> Result<()> {
        let layout = self.model.layout().clone();
        let schedule = self.schedule.as_ref().expect("schedule");
        let group = &schedule.groups[g].params;
        let delta = match self.run.algorithm {
            Algorithm::PartialUpdates => {
                let sets = &self.group_sets[g];
                let global = &self.global;
                let deltas: Vec<GradientBuffer> = self.pool.install(|| {
                    self.nodes
                        .par_iter()
                        .zip(sets.par_iter())
                        .map(|(n, set)| node_delta(&layout, &n.params, global, set))
                        .collect()
                });
                let supports: Vec<&IndexSet> = self.nodes.iter().map(|n| &n.trainable).collect();
                simulated_all_reduce(&layout, &deltas, &supports, &self.counts)?
            }
            // Dense reference reduction over full replicas.
            _ => {
                let mut sum = vec![0.0; layout.len()];
                for n in &self.nodes {
                    for seg in group.flat_segments(&layout) {
                        for i in seg {
                            sum[i] += n.params.values[i] - self.global.values[i];
                        }
                    }
                }
                let k = self.run.num_nodes as f64;
                sum.iter_mut().for_each(|v| *v /= k);
                sum
            }
        };
        outer_step_on(&mut self.global, &layout, &delta, &mut self.outer, group)?;
        let global = &self.global;
        let segments: Vec<_> = group.flat_segments(&layout).collect();
        for n in &mut self.nodes {
            for seg in &segments {
                n.params.values[seg.clone()].copy_from_slice(&global.values[seg.clone()]);
            }
        }
        self.sim_comm_s += self.comm_seconds(group.len());
        Ok(())
    }

    /// Synchronous data parallel: average per-node gradients of the global
    /// model, then one inner step on it.
    fn ddp_step(&mut self, round: usize, c: usize, lr: f64) -> Result<Vec<f64>> {
        let model = &self.model;
        let train = &self.train;
        let run = &self.run;
        let global = &self.global;
        let full = &self.full;
        let data_seed = run.data_seed();
        let results: Vec<Result<(f64, GradientBuffer)>> = self.pool.install(|| {
            self.nodes
                .par_iter_mut()
                .map(|node| {
                    let batch = next_batch(train, &node.shard, run.per_node_batch, &mut node.cursor, data_seed)?;
                    let (loss, grads) = model.loss_and_grad(global, &batch, full, &JacobianPlan::Full)?;
                    if !loss.is_finite() || loss > run.divergence_threshold {
                        return Err(divergence(round, c, node.id, loss));
                    }
                    Ok((loss, grads))
                })
                .collect()
        });
        let mut losses = Vec::with_capacity(results.len());
        let mut acc = GradientBuffer::zeros(self.full.clone());
        for r in results {
            let (loss, g) = r?;
            acc.add_assign(&g)?;
            losses.push(loss);
        }
        acc.divide(self.run.num_nodes as f64);
        let layout = self.model.layout();
        inner_step(&mut self.global, layout, &acc, self.ddp_opt.as_mut().expect("ddp state"), lr)?;
        self.sim_comm_s += self.comm_seconds(layout.len());
        Ok(losses)
    }
}

/// One DDP update from explicit per-node batches (used to check the
/// concatenated-batch identity).
pub fn ddp_update(
    model: &Transformer,
    params: &mut ModelParams,
    state: &mut InnerOptState,
    batches: &[TokenBatch],
    lr: f64,
) -> Result<Vec<f64>> {
    let full = IndexSet::full(model.layout());
    let mut acc = GradientBuffer::zeros(full.clone());
    let mut losses = Vec::new();
    for b in batches {
        let (loss, g) = model.loss_and_grad(params, b, &full, &JacobianPlan::Full)?;
        acc.add_assign(&g)?;
        losses.push(loss);
    }
    acc.divide(batches.len() as f64);
    inner_step(params, model.layout(), &acc, state, lr)?;
    Ok(losses)
}
