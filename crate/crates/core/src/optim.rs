//! Inner (per-node) and outer (global) optimizers.
//!
//! The inner optimizer keeps state only for the node's trainable set; frozen
//! indices have no moments and are never written. The outer optimizer treats
//! `−Δ` as a gradient over the full parameter space.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientBuffer, IndexSet, ModelParams, ParamLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InnerOptimizer {
    /// AdamW with bias correction and decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    /// Plain SGD, `θ ← θ − lr·g`.
    Sgd,
}

impl Default for InnerOptimizer {
    fn default() -> Self {
        InnerOptimizer::AdamW {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Optimizer state for exactly one coverage set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOptState {
    optimizer: InnerOptimizer,
    coverage: IndexSet,
    /// Per coverage rectangle: whether weight decay applies.
    decay: Vec<bool>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl InnerOptState {
    pub fn new(optimizer: InnerOptimizer, coverage: IndexSet, layout: &ParamLayout) -> Self {
        let decay = coverage
            .entries()
            .iter()
            .map(|(t, _)| layout.tensor(*t).kind.is_matrix_weight())
            .collect();
        let moments = || -> Vec<Vec<f64>> {
            match optimizer {
                InnerOptimizer::AdamW { .. } => coverage
                    .entries()
                    .iter()
                    .map(|(_, r)| vec![0.0; r.len()])
                    .collect(),
                InnerOptimizer::Sgd => Vec::new(),
            }
        };
        Self {
            optimizer,
            decay,
            first_moment: moments(),
            second_moment: moments(),
            coverage,
            step: 0,
        }
    }

    pub fn coverage(&self) -> &IndexSet {
        &self.coverage
    }

    pub fn optimizer(&self) -> InnerOptimizer {
        self.optimizer
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Number of stored scalar state entries.
    pub fn stored_entries(&self) -> usize {
        self.first_moment.iter().map(Vec::len).sum::<usize>()
            + self.second_moment.iter().map(Vec::len).sum::<usize>()
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// Restores moments and step counter (used by checkpoint loading).
    pub fn restore(&mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>, step: u64) -> Result<()> {
        let shape = |v: &Vec<Vec<f64>>| v.iter().map(Vec::len).collect::<Vec<_>>();
        if shape(&first) != shape(&self.first_moment) || shape(&second) != shape(&self.second_moment) {
            return Err(Error::Contract("optimizer state shape mismatch".into()));
        }
        self.first_moment = first;
        self.second_moment = second;
        self.step = step;
        Ok(())
    }

    pub fn reset(&mut self) {
        for v in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            v.fill(0.0);
        }
        self.step = 0;
    }
}

/// One inner optimizer step on the coverage indices of `params`.
pub fn inner_step(
    params: &mut ModelParams,
    layout: &ParamLayout,
    grads: &GradientBuffer,
    state: &mut InnerOptState,
    lr: f64,
) -> Result<()> {
    if grads.coverage() != &state.coverage {
        return Err(Error::Contract(
            "gradient coverage does not match optimizer state coverage".into(),
        ));
    }
    if params.len() != layout.len() {
        return Err(Error::Contract("parameter vector does not match layout".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    for (e, (tensor, rect)) in state.coverage.entries().iter().enumerate() {
        let spec = layout.tensor(*tensor);
        let g = &grads.blocks()[e];
        let mut i = 0;
        for seg in rect.row_segments(spec.cols) {
            let n = seg.len();
            let theta = &mut params.values[spec.offset + seg.start..spec.offset + seg.end];
            match state.optimizer {
                InnerOptimizer::Sgd => {
                    for (p, gi) in theta.iter_mut().zip(&g[i..i + n]) {
                        *p -= lr * gi;
                    }
                }
                InnerOptimizer::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let wd = if state.decay[e] { weight_decay } else { 0.0 };
                    let m = &mut state.first_moment[e][i..i + n];
                    let v = &mut state.second_moment[e][i..i + n];
                    for j in 0..n {
                        let gj = g[i + j];
                        if wd != 0.0 {
                            theta[j] *= 1.0 - lr * wd;
                        }
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            i += n;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Linear warmup from 0 to the peak, then cosine decay to the floor.
    #[default]
    WarmupCosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub floor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            peak: lr,
            warmup_steps: 0,
            total_steps: 0,
            floor: lr,
        }
    }

    /// Warmup over 5% of `total_steps`, cosine to zero afterwards.
    pub fn warmup_cosine(peak: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::WarmupCosine,
            peak,
            warmup_steps: total_steps / 20,
            total_steps,
            floor: 0.0,
        }
    }

    /// Learning rate for the (0-based) step `step`; steps past the end
    /// clamp to the floor.
    pub fn lr(&self, step: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.peak,
            ScheduleKind::WarmupCosine => {
                if step < self.warmup_steps {
                    return self.peak * step as f64 / self.warmup_steps as f64;
                }
                let span = self.total_steps.saturating_sub(self.warmup_steps);
                if span == 0 {
                    return self.peak;
                }
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OuterOptimizer {
    /// SGD with Nesterov momentum on the pseudo-gradient `−Δ`.
    Nesterov { lr: f64, momentum: f64 },
    /// Plain SGD on `−Δ`: `θ ← θ + lr·Δ`.
    Sgd { lr: f64 },
    /// `θ ← θ + Δ`.
    DirectApply,
}

impl Default for OuterOptimizer {
    fn default() -> Self {
        OuterOptimizer::Nesterov {
            lr: 0.4,
            momentum: 0.9,
        }
    }
}

/// Momentum buffer over the full parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterOptState {
    pub optimizer: OuterOptimizer,
    pub momentum: Vec<f64>,
}

impl OuterOptState {
    pub fn new(optimizer: OuterOptimizer, num_params: usize) -> Self {
        Self {
            optimizer,
            momentum: vec![0.0; num_params],
        }
    }
}

#[inline]
fn outer_update(theta: &mut f64, delta: f64, buf: &mut f64, opt: OuterOptimizer) {
    match opt {
        OuterOptimizer::DirectApply => *theta += delta,
        OuterOptimizer::Sgd { lr } => *theta -= lr * -delta,
        OuterOptimizer::Nesterov { lr, momentum } => {
            let g = -delta;
            *buf = momentum * *buf + g;
            *theta -= lr * (momentum * *buf + g);
        }
    }
}

/// Outer step over the whole parameter space.
pub fn outer_step(params: &mut ModelParams, delta: &[f64], state: &mut OuterOptState) -> Result<()> {
    if delta.len() != params.len() || state.momentum.len() != params.len() {
        return Err(Error::Shape(format!(
            "outer step: {} params, {} delta, {} momentum",
            params.len(),
            delta.len(),
            state.momentum.len()
        )));
    }
    let opt = state.optimizer;
    for ((p, d), b) in params.values.iter_mut().zip(delta).zip(state.momentum.iter_mut()) {
        outer_update(p, *d, b, opt);
    }
    Ok(())
}

/// Outer step restricted to the indices of `group` (streaming sync).
pub fn outer_step_on(
    params: &mut ModelParams,
    layout: &ParamLayout,
    delta: &[f64],
    state: &mut OuterOptState,
    group: &IndexSet,
) -> Result<()> {
    if delta.len() != params.len() || state.momentum.len() != params.len() {
        return Err(Error::Shape("outer step: length mismatch".into()));
    }
    let opt = state.optimizer;
    for seg in group.flat_segments(layout) {
        for i in seg {
            outer_update(&mut params.values[i], delta[i], &mut state.momentum[i], opt);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamId, Rect, TensorKind};

    fn layout() -> ParamLayout {
        ParamLayout::new(&ModelConfig::new(1, 4, 2, 5, 3))
    }

    /// Scalar AdamW written out longhand.
    fn adamw_scalar(theta: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, wd: f64) -> f64 {
        let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            th *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + 1e-8);
        }
        th
    }

    fn single_entry_set(layout: &ParamLayout) -> (IndexSet, usize) {
        let t = layout.index_of(TensorKind::MlpUp, Some(0));
        let mut s = IndexSet::empty();
        s.insert(t, Rect::new(1..2, 3..4));
        let spec = layout.tensor(t);
        (s, spec.offset + spec.cols + 3)
    }

    #[test]
    fn adamw_matches_scalar_oracle() {
        let layout = layout();
        let (set, flat) = single_entry_set(&layout);
        let opt = InnerOptimizer::AdamW {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut state = InnerOptState::new(opt, set.clone(), &layout);
        let mut params = ModelParams::zeros(&layout);
        params.values[flat] = 0.5;
        let mut g = GradientBuffer::zeros(set);
        g.blocks_mut()[0][0] = 1.0;
        for _ in 0..3 {
            inner_step(&mut params, &layout, &g, &mut state, 0.1).unwrap();
        }
        let want = adamw_scalar(0.5, &[1.0, 1.0, 1.0], 0.1, 0.9, 0.99, 0.0);
        // powi may be folded differently at compile time, so allow one ulp.
        assert!((params.values[flat] - want).abs() < 1e-15);
        // With g = 1 constant, m̂ = v̂ = 1, so each step moves by lr/(1+ε).
        assert!((want - (0.5 - 3.0 * 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_only_on_matrices() {
        let layout = layout();
        let full = IndexSet::full(&layout);
        let mut state = InnerOptState::new(InnerOptimizer::default(), full.clone(), &layout);
        let mut params = ModelParams::init(&layout, 1, 0.5);
        let before = params.clone();
        let g = GradientBuffer::zeros(full);
        inner_step(&mut params, &layout, &g, &mut state, 0.1).unwrap();
        for spec in layout.tensors() {
            for i in spec.range() {
                if spec.kind.is_matrix_weight() {
                    assert_eq!(params.values[i], before.values[i] * (1.0 - 0.01));
                } else {
                    assert_eq!(params.values[i], before.values[i]);
                }
            }
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let layout = layout();
        let full = IndexSet::full(&layout);
        let opt = InnerOptimizer::AdamW {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut state = InnerOptState::new(opt, full.clone(), &layout);
        let mut params = ModelParams::init(&layout, 2, 0.3);
        let before = params.clone();
        inner_step(&mut params, &layout, &GradientBuffer::zeros(full), &mut state, 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn frozen_indices_untouched_and_no_state() {
        let layout = layout();
        let t = layout.index_of(TensorKind::MlpDown, Some(0));
        let mut set = IndexSet::empty();
        set.insert(t, Rect::new(0..8, 0..4));
        let mut state = InnerOptState::new(InnerOptimizer::default(), set.clone(), &layout);
        assert_eq!(state.stored_entries(), 2 * set.len());
        let mut params = ModelParams::init(&layout, 3, 0.2);
        let before = params.clone();
        let mut g = GradientBuffer::zeros(set.clone());
        g.blocks_mut()[0].iter_mut().for_each(|v| *v = 0.7);
        for _ in 0..5 {
            inner_step(&mut params, &layout, &g, &mut state, 0.05).unwrap();
        }
        for i in 0..layout.len() {
            if !set.contains(&layout, ParamId(i)) {
                assert_eq!(params.values[i].to_bits(), before.values[i].to_bits());
            } else {
                assert_ne!(params.values[i], before.values[i]);
            }
        }
    }

    #[test]
    fn coverage_mismatch_rejected() {
        let layout = layout();
        let (set, _) = single_entry_set(&layout);
        let mut state = InnerOptState::new(InnerOptimizer::Sgd, set, &layout);
        let g = GradientBuffer::zeros(IndexSet::full(&layout));
        let mut params = ModelParams::zeros(&layout);
        assert!(matches!(
            inner_step(&mut params, &layout, &g, &mut state, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule {
            kind: ScheduleKind::WarmupCosine,
            peak: 3e-4,
            warmup_steps: 1500,
            total_steps: 11500,
            floor: 0.0,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(1500), 3e-4);
        assert_eq!(s.lr(11500), 0.0);
        // Halfway through the decay: cos(π/2) = 0 so lr = peak/2.
        assert!((s.lr(6500) - 1.5e-4).abs() < 1e-18);
        assert!((s.lr(750) - 1.5e-4).abs() < 1e-18);
        let f = LrSchedule { floor: 1e-5, ..s };
        assert_eq!(f.lr(11500), 1e-5);
        assert_eq!(LrSchedule::warmup_cosine(1.0, 200).warmup_steps, 10);
        assert_eq!(LrSchedule::constant(0.3).lr(99), 0.3);
    }

    #[test]
    fn nesterov_two_step_oracle() {
        let mut params = ModelParams { values: vec![0.0] };
        let mut state = OuterOptState::new(OuterOptimizer::Nesterov { lr: 0.4, momentum: 0.9 }, 1);
        outer_step(&mut params, &[1.0], &mut state).unwrap();
        // buf = -1, update = -1 + 0.9·(-1) = -1.9, θ = 0.76
        assert!((params.values[0] - 0.76).abs() < 1e-15);
        outer_step(&mut params, &[1.0], &mut state).unwrap();
        assert!((state.momentum[0] + 1.9).abs() < 1e-15);
        // update = -1 + 0.9·(-1.9) = -2.71, θ = 0.76 + 1.084
        assert!((params.values[0] - 1.844).abs() < 1e-12);
    }

    #[test]
    fn direct_apply_and_zero_delta() {
        let mut params = ModelParams { values: vec![1.0, -2.0] };
        let mut st = OuterOptState::new(OuterOptimizer::DirectApply, 2);
        outer_step(&mut params, &[0.25, 0.5], &mut st).unwrap();
        assert_eq!(params.values, vec![1.25, -1.5]);

        let mut st = OuterOptState::new(OuterOptimizer::default(), 2);
        outer_step(&mut params, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(params.values, vec![1.25, -1.5]);

        let mut p = ModelParams { values: vec![1.0] };
        let mut st = OuterOptState::new(OuterOptimizer::Nesterov { lr: 1.0, momentum: 0.0 }, 1);
        outer_step(&mut p, &[0.125], &mut st).unwrap();
        assert_eq!(p.values[0], 1.125);
    }
}
