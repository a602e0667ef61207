//! Analytic FLOPs, memory, communication and wall-clock models.
//!
//! FLOPs count one multiply-accumulate as two operations. `H` below is the
//! hidden width. All outputs are in base units (FLOPs, bytes, seconds).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::slicing::{build_slice_plan, SliceStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsConfig {
    pub batch: f64,
    pub seq: f64,
    pub hidden: f64,
    pub layers: f64,
    pub ffn: f64,
    pub vocab: f64,
    pub rho_mlp: f64,
    pub rho_attn: f64,
}

impl FlopsConfig {
    pub fn from_model(cfg: &ModelConfig, batch: usize, rho_mlp: f64, rho_attn: f64) -> Self {
        Self {
            batch: batch as f64,
            seq: cfg.seq_len as f64,
            hidden: cfg.hidden_dim as f64,
            layers: cfg.num_layers as f64,
            ffn: cfg.ffn_dim as f64,
            vocab: cfg.vocab_size as f64,
            rho_mlp,
            rho_attn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho_mlp", self.rho_mlp), ("rho_attn", self.rho_attn)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("cost.{name}"), "must satisfy 0 < rho <= 1"));
            }
        }
        for (name, v) in [
            ("batch", self.batch),
            ("seq", self.seq),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("cost.{name}"), "must be positive"));
            }
        }
        Ok(())
    }

    fn tokens(&self) -> f64 {
        self.batch * self.seq
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardFlops {
    pub emb: f64,
    pub proj: f64,
    pub attn: f64,
    pub out_proj: f64,
    /// proj + attn + out_proj, one layer.
    pub mha: f64,
    pub ffn: f64,
    pub head: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackwardFlops {
    pub emb: f64,
    pub mha: f64,
    pub ffn: f64,
    pub head: f64,
    pub total: f64,
}

pub fn forward_flops(c: &FlopsConfig) -> ForwardFlops {
    let (b, s, h) = (c.batch, c.seq, c.hidden);
    let emb = b * s * h;
    let proj = 6.0 * b * s * h * h;
    let attn = 4.0 * b * s * s * h;
    let out_proj = 2.0 * b * s * h * h;
    let mha = proj + attn + out_proj;
    let ffn = 4.0 * b * s * h * c.ffn;
    let head = 2.0 * b * s * h * c.vocab + 3.0 * b * s * c.vocab;
    ForwardFlops {
        emb,
        proj,
        attn,
        out_proj,
        mha,
        ffn,
        head,
        total: emb + c.layers * (mha + ffn) + head,
    }
}

/// Partial backward: full input Jacobians, parameter gradients scaled by
/// the trained fractions.
pub fn backward_flops(c: &FlopsConfig) -> BackwardFlops {
    let f = forward_flops(c);
    let (b, s, h) = (c.batch, c.seq, c.hidden);
    let mha = 8.0 * b * s * s * h + (10.0 + 6.0 * c.rho_attn) * b * s * h * h;
    let ffn = (4.0 + 4.0 * c.rho_mlp) * b * s * h * c.ffn;
    let emb = 2.0 * f.emb;
    let head = 2.0 * f.head;
    BackwardFlops {
        emb,
        mha,
        ffn,
        head,
        total: emb + c.layers * (mha + ffn) + head,
    }
}

/// Forward plus backward FLOPs per training token.
pub fn training_flops_per_token(c: &FlopsConfig) -> f64 {
    (forward_flops(c).total + backward_flops(c).total) / c.tokens()
}

/// Total training FLOPs of one run relative to another.
pub fn training_flops_ratio(
    ours: &FlopsConfig,
    tokens_ours: f64,
    base: &FlopsConfig,
    tokens_base: f64,
) -> f64 {
    training_flops_per_token(ours) * tokens_ours / (training_flops_per_token(base) * tokens_base)
}

/// Where the outer optimizer state and the offloaded global copy live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OuterStatePolicy {
    /// No outer optimizer (synchronous data parallel).
    None,
    /// Only the currently synchronizing group of `1/G` of the parameters is
    /// resident.
    #[default]
    ActiveGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryCoefficients {
    pub weight_bytes: f64,
    pub grad_bytes: f64,
    pub inner_opt_bytes: f64,
    pub outer_state_bytes: f64,
    pub offload_bytes: f64,
}

impl Default for MemoryCoefficients {
    /// fp32 master weights, bf16 gradients, two fp32 Adam moments, fp32
    /// outer momentum and fp32 offloaded global copy.
    fn default() -> Self {
        Self {
            weight_bytes: 4.0,
            grad_bytes: 2.0,
            inner_opt_bytes: 8.0,
            outer_state_bytes: 4.0,
            offload_bytes: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub total_params: f64,
    pub trainable_params: f64,
    pub groups: usize,
    pub policy: OuterStatePolicy,
    #[serde(default)]
    pub coefficients: MemoryCoefficients,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub weights: f64,
    pub grads: f64,
    pub inner_opt: f64,
    pub outer_state: f64,
    pub offloaded: f64,
    pub total_bytes: f64,
    pub total_gb: f64,
}

pub fn memory_estimate(m: &MemoryConfig) -> Result<MemoryBreakdown> {
    if m.groups == 0 {
        return Err(Error::config("cost.streaming_groups", "G must be at least 1"));
    }
    if m.trainable_params > m.total_params || m.trainable_params < 0.0 {
        return Err(Error::config(
            "cost.trainable_params",
            "trainable parameters must be in 0..=total parameters",
        ));
    }
    let c = &m.coefficients;
    let weights = c.weight_bytes * m.total_params;
    let grads = c.grad_bytes * m.trainable_params;
    let inner_opt = c.inner_opt_bytes * m.trainable_params;
    let (outer_state, offloaded) = match m.policy {
        OuterStatePolicy::None => (0.0, 0.0),
        OuterStatePolicy::ActiveGroup => {
            let active = m.total_params / m.groups as f64;
            (c.outer_state_bytes * active, c.offload_bytes * active)
        }
    };
    let total_bytes = weights + grads + inner_opt + outer_state + offloaded;
    Ok(MemoryBreakdown {
        weights,
        grads,
        inner_opt,
        outer_state,
        offloaded,
        total_bytes,
        total_gb: total_bytes / 1e9,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommConfig {
    pub payload_bytes: f64,
    pub num_nodes: usize,
    pub bandwidth: f64,
    pub sync_period: usize,
    pub step_compute_s: f64,
    /// Streaming groups; the payload is split evenly across their events.
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

/// Ring all-reduce time `2(K−1)/K · M/B` for one full-payload sync.
pub fn comm_time(c: &CommConfig) -> f64 {
    if c.num_nodes < 2 {
        return 0.0;
    }
    let k = c.num_nodes as f64;
    2.0 * (k - 1.0) / k * c.payload_bytes / c.bandwidth
}

/// Communication time per local step when syncing every `H` steps.
pub fn comm_time_amortized(c: &CommConfig) -> f64 {
    comm_time(c) / c.sync_period as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WallclockAlgorithm {
    /// Per step `max(T_comm, T_comp)`: communication fully overlapped.
    Ddp,
    /// Per step `T_comp`, plus one (possibly streamed) sync every `H` steps.
    LowComm,
}

pub fn wallclock_simulate(c: &CommConfig, total_steps: f64, algorithm: WallclockAlgorithm) -> f64 {
    let t_comm = comm_time(c);
    match algorithm {
        WallclockAlgorithm::Ddp => total_steps * t_comm.max(c.step_compute_s),
        WallclockAlgorithm::LowComm => {
            let groups = c.groups.max(1) as f64;
            let events = total_steps / c.sync_period as f64 * groups;
            total_steps * c.step_compute_s + events * (t_comm / groups)
        }
    }
}

/// Declarative inputs for a cost report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default = "ModelConfig::gpt3_xl")]
    pub model: ModelConfig,
    #[serde(default = "default_nodes")]
    pub num_nodes: usize,
    #[serde(default = "one")]
    pub num_slices: usize,
    #[serde(default)]
    pub strategy: SliceStrategy,
    /// Sequences per node per step.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_tokens")]
    pub tokens: f64,
    #[serde(default = "default_tokens")]
    pub baseline_tokens: f64,
    /// Bytes per second per link.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default = "default_step_compute")]
    pub step_compute_s: f64,
    #[serde(default = "default_period")]
    pub sync_period: usize,
    #[serde(default = "default_groups")]
    pub streaming_groups: usize,
    /// Bytes per parameter on the wire.
    #[serde(default = "default_wire_bytes")]
    pub wire_bytes_per_param: f64,
    /// Bytes sent per full sync; defaults to `params · wire_bytes_per_param`.
    #[serde(default)]
    pub payload_bytes: Option<f64>,
    /// Extra token factor the low-communication run needs to match DDP.
    #[serde(default = "default_token_factor")]
    pub lowcomm_token_factor: f64,
    #[serde(default)]
    pub memory: MemoryCoefficients,
}

fn default_nodes() -> usize {
    32
}
fn default_batch() -> usize {
    16
}
fn default_tokens() -> f64 {
    26e9
}
fn default_bandwidth() -> f64 {
    2.875e9
}
fn default_step_compute() -> f64 {
    0.44
}
fn default_period() -> usize {
    100
}
fn default_groups() -> usize {
    9
}
fn default_wire_bytes() -> f64 {
    2.0
}
fn default_token_factor() -> f64 {
    1.7
}

impl Default for CostConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub rho_mlp: f64,
    pub rho_attn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub forward: ForwardFlops,
    pub backward: BackwardFlops,
    pub per_token: f64,
    pub baseline_per_token: f64,
    pub tokens: f64,
    pub baseline_tokens: f64,
    pub training_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub payload_bytes: f64,
    pub per_sync_s: f64,
    pub amortized_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallclockReport {
    pub ddp_steps: f64,
    pub lowcomm_steps: f64,
    pub ddp_s: f64,
    pub lowcomm_s: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: ParamReport,
    pub flops: FlopsReport,
    pub memory: MemoryBreakdown,
    pub memory_ddp: MemoryBreakdown,
    pub comm: CommReport,
    pub wallclock: WallclockReport,
}

pub fn cost_report(c: &CostConfig) -> Result<CostReport> {
    if c.bandwidth <= 0.0 || c.bandwidth.is_nan() {
        return Err(Error::config("cost.bandwidth", "must be positive"));
    }
    if c.sync_period == 0 {
        return Err(Error::config("cost.sync_period", "must be at least 1"));
    }
    if c.payload_bytes.is_some_and(|b| !(b > 0.0)) {
        return Err(Error::config("cost.payload_bytes", "must be positive"));
    }
    let plan = build_slice_plan(&c.model, c.num_nodes, c.num_slices, c.strategy)?;
    let frac = plan.trainable_fraction();
    let total = plan.layout().len();
    let ours = FlopsConfig::from_model(&c.model, c.batch_size, frac.rho_mlp, frac.rho_attn);
    let base = FlopsConfig::from_model(&c.model, c.batch_size, 1.0, 1.0);
    ours.validate()?;
    let p = total as f64;
    let memory = memory_estimate(&MemoryConfig {
        total_params: p,
        trainable_params: frac.trainable_params as f64,
        groups: c.streaming_groups,
        policy: OuterStatePolicy::ActiveGroup,
        coefficients: c.memory,
    })?;
    let memory_ddp = memory_estimate(&MemoryConfig {
        total_params: p,
        trainable_params: p,
        groups: 1,
        policy: OuterStatePolicy::None,
        coefficients: c.memory,
    })?;
    let comm = CommConfig {
        payload_bytes: c.payload_bytes.unwrap_or(p * c.wire_bytes_per_param),
        num_nodes: c.num_nodes,
        bandwidth: c.bandwidth,
        sync_period: c.sync_period,
        step_compute_s: c.step_compute_s,
        groups: c.streaming_groups,
    };
    let tokens_per_step = (c.num_nodes * c.batch_size * c.model.seq_len) as f64;
    let ddp_steps = (c.baseline_tokens / tokens_per_step).ceil();
    let lowcomm_steps = (ddp_steps * c.lowcomm_token_factor).ceil();
    let ddp_s = wallclock_simulate(&comm, ddp_steps, WallclockAlgorithm::Ddp);
    let lowcomm_s = wallclock_simulate(&comm, lowcomm_steps, WallclockAlgorithm::LowComm);
    Ok(CostReport {
        params: ParamReport {
            total,
            trainable: frac.trainable_params,
            rho_mlp: frac.rho_mlp,
            rho_attn: frac.rho_attn,
        },
        flops: FlopsReport {
            forward: forward_flops(&ours),
            backward: backward_flops(&ours),
            per_token: training_flops_per_token(&ours),
            baseline_per_token: training_flops_per_token(&base),
            tokens: c.tokens,
            baseline_tokens: c.baseline_tokens,
            training_ratio: training_flops_ratio(&ours, c.tokens, &base, c.baseline_tokens),
        },
        memory,
        memory_ddp,
        comm: CommReport {
            payload_bytes: comm.payload_bytes,
            per_sync_s: comm_time(&comm),
            amortized_s: comm_time_amortized(&comm),
        },
        wallclock: WallclockReport {
            ddp_steps,
            lowcomm_steps,
            ddp_s,
            lowcomm_s,
            ratio: lowcomm_s / ddp_s,
        },
    })
}

/// Parameter that a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKey {
    Bandwidth,
    Slices,
    Nodes,
    SyncPeriod,
}

impl std::str::FromStr for SweepKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bandwidth" => Ok(SweepKey::Bandwidth),
            "slices" | "num_slices" => Ok(SweepKey::Slices),
            "nodes" | "num_nodes" => Ok(SweepKey::Nodes),
            "sync_period" | "h" => Ok(SweepKey::SyncPeriod),
            other => Err(Error::config(
                "sweep",
                format!("unknown key {other:?} (expected bandwidth, slices, nodes or sync_period)"),
            )),
        }
    }
}

pub const SWEEP_HEADER: &str = "key,value,trainable_params,memory_gb,flops_per_token,flops_ratio,comm_s,amortized_comm_s,ddp_wallclock_s,lowcomm_wallclock_s";

/// One CSV row per sweep point; the base config supplies everything else.
pub fn sweep_csv(base: &CostConfig, key: SweepKey, values: &[f64]) -> Result<String> {
    if values.is_empty() {
        return Err(Error::config("sweep", "needs at least one value"));
    }
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for &v in values {
        let mut c = base.clone();
        let as_count = || -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config("sweep", format!("{v} is not a positive integer")))
            }
        };
        let name = match key {
            SweepKey::Bandwidth => {
                c.bandwidth = v;
                "bandwidth"
            }
            SweepKey::Slices => {
                c.num_slices = as_count()?;
                "slices"
            }
            SweepKey::Nodes => {
                c.num_nodes = as_count()?;
                "nodes"
            }
            SweepKey::SyncPeriod => {
                c.sync_period = as_count()?;
                "sync_period"
            }
        };
        let r = cost_report(&c)?;
        out.push_str(&format!(
            "{name},{v},{},{},{},{},{},{},{},{}\n",
            r.params.trainable,
            r.memory.total_gb,
            r.flops.per_token,
            r.flops.training_ratio,
            r.comm.per_sync_s,
            r.comm.amortized_s,
            r.wallclock.ddp_s,
            r.wallclock.lowcomm_s
        ));
    }
    Ok(out)
}
