use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BackwardMode, ModelConfig};
use crate::optim::{InnerOptimizer, LrSchedule, OuterOptimizer, ScheduleKind};
use crate::slicing::{build_sync_schedule, validate_slicing, SliceStrategy, SyncGrouping};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Gradients all-reduced every step, one optimizer on the global model.
    Ddp,
    /// `H` local steps on full replicas, then an outer step on the mean delta.
    Diloco,
    /// Like DiLoCo, but each node trains only its slice.
    #[default]
    PartialUpdates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    #[serde(default)]
    pub schedule: ScheduleKind,
    pub peak: f64,
    /// Warmup length as a fraction of all inner steps.
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub floor: f64,
}

fn default_warmup_fraction() -> f64 {
    0.05
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::WarmupCosine,
            peak: 3e-3,
            warmup_fraction: 0.05,
            floor: 0.0,
        }
    }
}

impl LrConfig {
    pub fn schedule(&self, total_steps: usize) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            peak: self.peak,
            warmup_steps: (self.warmup_fraction * total_steps as f64).round() as usize,
            total_steps,
            floor: self.floor,
        }
    }
}

/// Simulated hardware used to fill the `sim_*` metric columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimClock {
    /// Sustained FLOP/s of one node.
    pub flops_per_second: f64,
    /// Per-link bandwidth in bytes per second.
    pub bandwidth: f64,
    /// Bytes per parameter on the wire.
    pub wire_bytes_per_param: f64,
}

impl Default for SimClock {
    fn default() -> Self {
        Self {
            flops_per_second: 1e12,
            bandwidth: 2.875e9,
            wire_bytes_per_param: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    pub num_nodes: usize,
    #[serde(default = "one")]
    pub num_slices: usize,
    #[serde(default)]
    pub slice_strategy: SliceStrategy,
    /// `H`: local steps per round.
    pub local_steps: usize,
    /// `T`: outer rounds.
    pub rounds: usize,
    #[serde(default)]
    pub backward_mode: BackwardMode,
    #[serde(default)]
    pub sync: SyncGrouping,
    /// Sequences per node per local step.
    pub per_node_batch: usize,
    /// Must equal `num_nodes · per_node_batch` when given.
    #[serde(default)]
    pub global_batch: Option<usize>,
    #[serde(default)]
    pub inner: InnerOptimizer,
    #[serde(default)]
    pub inner_lr: LrConfig,
    #[serde(default)]
    pub outer: OuterOptimizer,
    /// Zero the inner optimizer moments at the end of every round.
    #[serde(default)]
    pub reset_inner_state: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Write a checkpoint every this many rounds (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub sim: SimClock,
}

fn one() -> usize {
    1
}
fn default_init_std() -> f64 {
    0.02
}
fn default_divergence() -> f64 {
    1e4
}
fn default_eval_batch() -> usize {
    16
}

impl RunConfig {
    /// A partial-updates config with defaults for everything optional.
    pub fn new(num_nodes: usize, num_slices: usize, local_steps: usize, rounds: usize, per_node_batch: usize) -> Self {
        Self {
            algorithm: Algorithm::PartialUpdates,
            num_nodes,
            num_slices,
            slice_strategy: SliceStrategy::MlpOnly,
            local_steps,
            rounds,
            backward_mode: BackwardMode::FullJacobian,
            sync: SyncGrouping::AllAtOnce,
            per_node_batch,
            global_batch: None,
            inner: InnerOptimizer::default(),
            inner_lr: LrConfig::default(),
            outer: OuterOptimizer::default(),
            reset_inner_state: false,
            seed: 0,
            init_std: default_init_std(),
            divergence_threshold: default_divergence(),
            eval_batch_size: default_eval_batch(),
            checkpoint_every: 0,
            sim: SimClock::default(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.rounds * self.local_steps
    }

    /// Seed of the per-epoch shard shuffles.
    pub fn data_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn global_batch(&self) -> usize {
        self.num_nodes * self.per_node_batch
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let positive = [
            ("run.num_nodes", self.num_nodes),
            ("run.num_slices", self.num_slices),
            ("run.local_steps", self.local_steps),
            ("run.rounds", self.rounds),
            ("run.per_node_batch", self.per_node_batch),
            ("run.eval_batch_size", self.eval_batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if let Some(g) = self.global_batch {
            if g != self.global_batch() {
                return Err(Error::config(
                    "run.global_batch",
                    format!(
                        "global batch = K x per-node batch (got {g}, K x b = {})",
                        self.global_batch()
                    ),
                ));
            }
        }
        if !(self.inner_lr.peak > 0.0 && self.inner_lr.peak.is_finite()) {
            return Err(Error::config("run.inner_lr.peak", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.inner_lr.warmup_fraction) {
            return Err(Error::config("run.inner_lr.warmup_fraction", "must be in [0, 1]"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("run.init_std", "must be positive"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::config("run.divergence_threshold", "must be positive"));
        }
        match self.algorithm {
            Algorithm::Ddp | Algorithm::Diloco => {
                if self.num_slices != 1 {
                    return Err(Error::config(
                        "run.num_slices",
                        "ddp and diloco train every parameter on every node; num_slices must be 1",
                    ));
                }
                if self.backward_mode != BackwardMode::FullJacobian {
                    return Err(Error::config(
                        "run.backward_mode",
                        "detach modes only apply to partial-updates",
                    ));
                }
            }
            Algorithm::PartialUpdates => {
                validate_slicing(model, self.num_nodes, self.num_slices, self.slice_strategy)?;
                if self.backward_mode != BackwardMode::FullJacobian && self.num_slices < 2 {
                    return Err(Error::config(
                        "run.backward_mode",
                        "detach modes need at least two MLP slices (num_slices >= 2)",
                    ));
                }
            }
        }
        if self.algorithm != Algorithm::Ddp {
            build_sync_schedule(model, self.sync, self.local_steps)?;
        }
        Ok(())
    }
}
