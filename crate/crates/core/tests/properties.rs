use proptest::prelude::*;

use coordtrain::costmodel::{
    backward_flops, comm_time, comm_time_amortized, forward_flops, memory_estimate, training_flops_per_token,
    CommConfig, FlopsConfig, MemoryCoefficients, MemoryConfig, OuterStatePolicy,
};
use coordtrain::data::{generate_split, next_batch, shard, Cursor, Generator, SyntheticCorpusSpec};
use coordtrain::model::{GradientBuffer, IndexSet, ModelConfig, ModelParams, ParamId, ParamLayout, Rect};
use coordtrain::optim::{inner_step, InnerOptState, InnerOptimizer};
use coordtrain::orchestrator::simulated_all_reduce;
use coordtrain::slicing::{build_slice_plan, SliceStrategy};

fn flops_config() -> impl Strategy<Value = FlopsConfig> {
    (
        1usize..64,
        1usize..4096,
        1usize..8192,
        1usize..96,
        1usize..32768,
        1usize..200_000,
        1usize..=16,
        1usize..=16,
    )
        .prop_map(|(b, s, h, l, f, v, nm, na)| FlopsConfig {
            batch: b as f64,
            seq: s as f64,
            hidden: h as f64,
            layers: l as f64,
            ffn: f as f64,
            vocab: v as f64,
            rho_mlp: 1.0 / nm as f64,
            rho_attn: 1.0 / na as f64,
        })
}

fn total(c: &FlopsConfig) -> f64 {
    forward_flops(c).total + backward_flops(c).total
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn flops_match_expanded_polynomial(c in flops_config()) {
        let (b, s, h, l, f, v) = (c.batch, c.seq, c.hidden, c.layers, c.ffn, c.vocab);
        let bs = b * s;
        let fwd = bs * h + l * (8.0 * bs * h * h + 4.0 * bs * s * h + 4.0 * bs * h * f) + 2.0 * bs * h * v + 3.0 * bs * v;
        let bwd = 2.0 * bs * h
            + l * (8.0 * bs * s * h + 10.0 * bs * h * h + 6.0 * c.rho_attn * bs * h * h + 4.0 * bs * h * f + 4.0 * c.rho_mlp * bs * h * f)
            + 4.0 * bs * h * v
            + 6.0 * bs * v;
        prop_assert!(close(forward_flops(&c).total, fwd, 1e-12));
        prop_assert!(close(backward_flops(&c).total, bwd, 1e-12));
        prop_assert!(close(training_flops_per_token(&c), (fwd + bwd) / bs, 1e-12));
        // Training only part of the model never costs more than training all of it.
        let dense = FlopsConfig { rho_mlp: 1.0, rho_attn: 1.0, ..c };
        prop_assert!(total(&c) <= total(&dense));
    }
}

proptest! {
    #[test]
    fn flops_grow_with_every_dimension(c in flops_config(), which in 0usize..8) {
        let mut bigger = c;
        match which {
            0 => bigger.batch += 1.0,
            1 => bigger.seq += 1.0,
            2 => bigger.hidden += 1.0,
            3 => bigger.layers += 1.0,
            4 => bigger.ffn += 1.0,
            5 => bigger.vocab += 1.0,
            6 => bigger.rho_mlp = (bigger.rho_mlp * 2.0).min(1.0),
            _ => bigger.rho_attn = (bigger.rho_attn * 2.0).min(1.0),
        }
        if bigger == c {
            prop_assert_eq!(total(&bigger), total(&c));
        } else {
            prop_assert!(total(&bigger) > total(&c));
        }
    }

    #[test]
    fn memory_terms_sum_and_limits(p in 1e6f64..1e11, frac in 0.0f64..=1.0, g in 1usize..64) {
        let cfg = MemoryConfig {
            total_params: p,
            trainable_params: p * frac,
            groups: g,
            policy: OuterStatePolicy::ActiveGroup,
            coefficients: MemoryCoefficients::default(),
        };
        let m = memory_estimate(&cfg).unwrap();
        let sum = m.weights + m.grads + m.inner_opt + m.outer_state + m.offloaded;
        prop_assert!(close(m.total_bytes, sum, 1e-12));
        prop_assert!(close(m.total_gb, m.total_bytes / 1e9, 1e-12));

        let ddp = memory_estimate(&MemoryConfig { trainable_params: p, policy: OuterStatePolicy::None, ..cfg }).unwrap();
        let streamed_all = memory_estimate(&MemoryConfig { trainable_params: p, groups: 1 << 40, ..cfg }).unwrap();
        prop_assert!(close(streamed_all.total_bytes, ddp.total_bytes, 1e-9));
        prop_assert!(m.total_bytes - m.outer_state - m.offloaded <= ddp.total_bytes * (1.0 + 1e-12));

        let more = memory_estimate(&MemoryConfig { trainable_params: (p * frac + 1.0).min(p), ..cfg }).unwrap();
        prop_assert!(more.total_bytes >= m.total_bytes);
    }

    #[test]
    fn comm_time_bounds(m in 1.0f64..1e11, k in 1usize..512, bw in 1e6f64..1e12, h in 1usize..1000) {
        let c = CommConfig { payload_bytes: m, num_nodes: k, bandwidth: bw, sync_period: h, step_compute_s: 0.1, groups: 1 };
        let t = comm_time(&c);
        if k == 1 {
            prop_assert_eq!(t, 0.0);
        } else {
            prop_assert!(t > 0.0 && t < 2.0 * m / bw);
            let faster = CommConfig { bandwidth: bw * 2.0, ..c };
            let heavier = CommConfig { payload_bytes: m * 2.0, ..c };
            prop_assert!(comm_time(&faster) < t);
            prop_assert!(comm_time(&heavier) > t);
        }
        prop_assert!(close(comm_time_amortized(&c), t / h as f64, 1e-12) || t == 0.0);
    }
}

fn strategy() -> impl Strategy<Value = SliceStrategy> {
    prop_oneof![
        Just(SliceStrategy::MlpOnly),
        Just(SliceStrategy::MlpAndHeads),
        Just(SliceStrategy::MlpHeadsAndWo),
        Just(SliceStrategy::ByLayers),
    ]
}

fn small_model() -> ModelConfig {
    ModelConfig::new(4, 8, 4, 11, 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn count_vector_matches_closed_form(n_pow in 0u32..3, reps in 1usize..4, s in strategy()) {
        let n = 1usize << n_pow;
        let k = n * reps;
        let plan = build_slice_plan(&small_model(), k, n, s).unwrap();
        let counts = plan.count_vector();
        for (i, &c) in counts.iter().enumerate() {
            prop_assert_eq!(c, plan.count_closed_form(ParamId(i)));
            prop_assert!(c >= 1);
        }
        // Nodes with the same slice index share a trainable set.
        for node in n..k {
            prop_assert_eq!(plan.trainable(node), plan.trainable(node % n));
        }
    }

    #[test]
    fn all_reduce_matches_per_index_mean(
        n_pow in 0u32..3,
        reps in 1usize..3,
        s in strategy(),
        seed in any::<u64>(),
    ) {
        let n = 1usize << n_pow;
        let k = n * reps;
        let plan = build_slice_plan(&small_model(), k, n, s).unwrap();
        let layout = plan.layout().clone();
        let deltas: Vec<GradientBuffer> = (0..k)
            .map(|node| {
                let p = ModelParams::init(&layout, seed.wrapping_add(node as u64), 1.0);
                let mut b = GradientBuffer::zeros(plan.trainable(node).clone());
                let segs: Vec<_> = plan.trainable(node).flat_segments(&layout).collect();
                let mut vals = segs.iter().flat_map(|r| p.values[r.clone()].iter().copied());
                for blk in b.blocks_mut() {
                    for v in blk.iter_mut() {
                        *v = vals.next().unwrap();
                    }
                }
                b
            })
            .collect();
        let supports: Vec<&IndexSet> = (0..k).map(|node| plan.trainable(node)).collect();
        let counts = plan.count_vector();
        let got = simulated_all_reduce(&layout, &deltas, &supports, &counts).unwrap();
        let dense: Vec<Vec<f64>> = deltas.iter().map(|d| d.to_dense(&layout)).collect();
        for i in 0..layout.len() {
            let mut sum = 0.0;
            for node in 0..k {
                if plan.trainable(node).contains(&layout, ParamId(i)) {
                    sum += dense[node][i];
                }
            }
            prop_assert_eq!(got[i].to_bits(), (sum / counts[i] as f64).to_bits());
        }
    }
}

fn random_set(layout: &ParamLayout, picks: &[(usize, usize, usize, usize, usize)]) -> IndexSet {
    let mut set = IndexSet::empty();
    for &(t, r0, r1, c0, c1) in picks {
        let t = t % layout.tensors().len();
        let spec = layout.tensor(t);
        let (r0, r1) = (r0 % spec.rows, r1 % spec.rows);
        let (c0, c1) = (c0 % spec.cols, c1 % spec.cols);
        let rows = r0.min(r1)..r0.max(r1) + 1;
        let cols = c0.min(c1)..c0.max(c1) + 1;
        if !set.touches(t) {
            set.insert(t, Rect::new(rows, cols));
        }
    }
    set
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// AdamW restricted to a set agrees, on that set, with AdamW over every
    /// parameter when the gradient is zero elsewhere; everything outside
    /// the set is untouched.
    #[test]
    fn masked_adamw_equals_isolated_problem(
        picks in prop::collection::vec((0usize..64, 0usize..64, 0usize..64, 0usize..64, 0usize..64), 1..6),
        seed in any::<u64>(),
        steps in 1usize..6,
    ) {
        let layout = ParamLayout::new(&small_model());
        let set = random_set(&layout, &picks);
        let full = IndexSet::full(&layout);
        let opt = InnerOptimizer::default();
        let mut masked = ModelParams::init(&layout, seed, 0.5);
        let before = masked.clone();
        let mut isolated = masked.clone();
        let mut sm = InnerOptState::new(opt, set.clone(), &layout);
        let mut si = InnerOptState::new(opt, full.clone(), &layout);
        for step in 0..steps {
            let g = ModelParams::init(&layout, seed ^ (step as u64 + 1), 1.0);
            let mut gm = GradientBuffer::zeros(set.clone());
            let mut gi = GradientBuffer::zeros(full.clone());
            let mut dense = vec![0.0; layout.len()];
            for seg in set.flat_segments(&layout) {
                dense[seg.clone()].copy_from_slice(&g.values[seg]);
            }
            for (buf, cov) in [(&mut gm, &set), (&mut gi, &full)] {
                let segs: Vec<_> = cov.flat_segments(&layout).collect();
                let mut vals = segs.iter().flat_map(|r| dense[r.clone()].iter().copied());
                for blk in buf.blocks_mut() {
                    for v in blk.iter_mut() {
                        *v = vals.next().unwrap();
                    }
                }
            }
            inner_step(&mut masked, &layout, &gm, &mut sm, 1e-2).unwrap();
            inner_step(&mut isolated, &layout, &gi, &mut si, 1e-2).unwrap();
        }
        prop_assert_eq!(sm.stored_entries(), 2 * set.len());
        for seg in set.flat_segments(&layout) {
            for i in seg {
                prop_assert_eq!(masked.values[i].to_bits(), isolated.values[i].to_bits());
            }
        }
        for seg in set.complement(&layout).flat_segments(&layout) {
            for i in seg {
                prop_assert_eq!(masked.values[i].to_bits(), before.values[i].to_bits());
            }
        }
    }

    #[test]
    fn shards_are_disjoint_and_batches_deterministic(k in 1usize..9, seed in any::<u64>(), b in 1usize..4) {
        let spec = SyntheticCorpusSpec {
            vocab_size: 12,
            seq_len: 4,
            generator: Generator::RandomUniform,
            seed,
            num_sequences: 40,
            markov_branching: 2,
        };
        let corpus = generate_split(&spec, 0).unwrap();
        let views: Vec<_> = (0..k).map(|n| shard(&corpus, k, n).unwrap()).collect();
        let mut seen = vec![false; corpus.num_sequences()];
        for v in &views {
            prop_assert_eq!(v.indices.len(), 40 / k);
            for &i in &v.indices {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        let view = &views[k - 1];
        if b <= view.indices.len() {
            let (mut c1, mut c2) = (Cursor::default(), Cursor::default());
            for _ in 0..10 {
                let x = next_batch(&corpus, view, b, &mut c1, seed).unwrap();
                let y = next_batch(&corpus, view, b, &mut c2, seed).unwrap();
                prop_assert_eq!(x, y);
            }
        }
    }
}
