use super::*;
use crate::slicing::{build_slice_plan, head_group, SliceStrategy};
use rand::{Rng, SeedableRng};

fn tiny() -> ModelConfig {
    ModelConfig::new(2, 8, 2, 11, 5)
}

fn random_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..batch * cfg.seq_len)
        .map(|_| rng.random_range(0..cfg.vocab_size as u32))
        .collect();
    TokenBatch::new(batch, cfg.seq_len, tokens).unwrap()
}

/// Params with randomized layer-norm gains and biases so every class has a
/// non-trivial gradient.
fn random_params(layout: &ParamLayout, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(layout, seed, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for spec in layout.tensors() {
        if spec.kind.is_norm() {
            for v in &mut p.values[spec.range()] {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    p
}

#[test]
fn zero_params_give_uniform_logits() {
    let cfg = tiny();
    let model = Transformer::new(cfg.clone()).unwrap();
    let params = ModelParams::zeros(model.layout());
    let batch = random_batch(&cfg, 2, 1);
    let (logits, _) = model.forward(&params, &batch).unwrap();
    assert!(logits.data.iter().all(|&v| v == 0.0));
    let loss = model.loss(&params, &batch).unwrap();
    assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
}

#[test]
fn single_token_forward_by_hand() {
    // d = 4, h = 2, V = 3; all block weights zero so every layer is the
    // identity and logits = LN(E[tok])·Eᵀ.
    let cfg = ModelConfig::new(1, 4, 2, 3, 2);
    let model = Transformer::new(cfg).unwrap();
    let layout = model.layout().clone();
    let mut params = ModelParams::zeros(&layout);
    let emb = layout.spec(TensorKind::TokenEmbedding, None).clone();
    for i in 0..3 {
        params.values[emb.offset + i * 4 + i] = 1.0;
    }
    for kind in [TensorKind::Ln1Gain, TensorKind::Ln2Gain] {
        let s = layout.spec(kind, Some(0)).clone();
        params.values[s.range()].fill(1.0);
    }
    let g = layout.spec(TensorKind::FinalLnGain, None).clone();
    params.values[g.range()].fill(1.0);

    let (logits, _) = model.forward_tokens(&params, 1, &[0]).unwrap();
    // x = (1,0,0,0): mean 1/4, variance 3/16.
    let std = (0.1875f64 + 1e-5).sqrt();
    let want = [0.75 / std, -0.25 / std, -0.25 / std];
    for (got, want) in logits.data.iter().zip(want) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

/// Straightforward per-position reference forward, written independently of
/// the batched implementation.
fn reference_logits(cfg: &ModelConfig, layout: &ParamLayout, p: &ModelParams, seq: &[u32]) -> Vec<Vec<f64>> {
    let d = cfg.hidden_dim;
    let t_len = seq.len();
    let get = |kind, layer| p.tensor(layout.spec(kind, layer)).to_vec();
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mu = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    };
    let vecmat = |x: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
        (0..cols)
            .map(|c| x.iter().enumerate().map(|(r, xv)| xv * w[r * cols + c]).sum())
            .collect()
    };
    let emb = get(TensorKind::TokenEmbedding, None);
    let pos = get(TensorKind::PositionEmbedding, None);
    let mut xs: Vec<Vec<f64>> = (0..t_len)
        .map(|t| (0..d).map(|c| emb[seq[t] as usize * d + c] + pos[t * d + c]).collect())
        .collect();
    let (h, dh, f) = (cfg.num_heads, cfg.head_dim, cfg.ffn_dim);
    for l in 0..cfg.num_layers {
        let l = Some(l);
        let xn: Vec<_> = xs
            .iter()
            .map(|x| ln(x, &get(TensorKind::Ln1Gain, l), &get(TensorKind::Ln1Bias, l)))
            .collect();
        let q: Vec<_> = xn.iter().map(|x| vecmat(x, &get(TensorKind::Query, l), h * dh)).collect();
        let k: Vec<_> = xn.iter().map(|x| vecmat(x, &get(TensorKind::Key, l), h * dh)).collect();
        let v: Vec<_> = xn.iter().map(|x| vecmat(x, &get(TensorKind::Value, l), h * dh)).collect();
        let mut mid = xs.clone();
        for t in 0..t_len {
            let mut u = vec![0.0; h * dh];
            for j in 0..h {
                let r = j * dh..(j + 1) * dh;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        q[t][r.clone()].iter().zip(&k[s][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for s in 0..=t {
                    for c in r.clone() {
                        u[c] += scores[s].exp() / z * v[s][c];
                    }
                }
            }
            let o = vecmat(&u, &get(TensorKind::AttnOut, l), d);
            for c in 0..d {
                mid[t][c] += o[c];
            }
        }
        for t in 0..t_len {
            let xn2 = ln(&mid[t], &get(TensorKind::Ln2Gain, l), &get(TensorKind::Ln2Bias, l));
            let hid: Vec<f64> = vecmat(&xn2, &get(TensorKind::MlpUp, l), f)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let y = vecmat(&hid, &get(TensorKind::MlpDown, l), d);
            xs[t] = mid[t].iter().zip(&y).map(|(a, b)| a + b).collect();
        }
    }
    let g = get(TensorKind::FinalLnGain, None);
    let b = get(TensorKind::FinalLnBias, None);
    xs.iter()
        .map(|x| {
            let xf = ln(x, &g, &b);
            (0..cfg.vocab_size)
                .map(|vtok| (0..d).map(|c| xf[c] * emb[vtok * d + c]).sum())
                .collect()
        })
        .collect()
}

#[test]
fn forward_matches_reference() {
    let cfg = tiny();
    let model = Transformer::new(cfg.clone()).unwrap();
    let params = random_params(model.layout(), 3);
    let batch = random_batch(&cfg, 3, 4);
    let (logits, _) = model.forward(&params, &batch).unwrap();
    let inputs = batch.inputs();
    let s = cfg.seq_len - 1;
    for b in 0..3 {
        let want = reference_logits(&cfg, model.layout(), &params, &inputs[b * s..(b + 1) * s]);
        for t in 0..s {
            for (x, y) in logits.row(b * s + t).iter().zip(&want[t]) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn initial_loss_near_log_vocab() {
    let cfg = ModelConfig::new(2, 32, 4, 64, 16);
    let model = Transformer::new(cfg.clone()).unwrap();
    let params = ModelParams::init(model.layout(), 5, 0.02);
    let loss = model.loss(&params, &random_batch(&cfg, 4, 6)).unwrap();
    let ln_v = 64f64.ln();
    assert!((loss - ln_v).abs() / ln_v < 0.05, "loss {loss}");
}

#[test]
fn cross_entropy_examples() {
    let logits = Mat::from_vec(2, 3, vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
    let (loss, d) = cross_entropy_loss(&logits, &[1, 0]).unwrap();
    let l2 = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
    assert!((loss - (3f64.ln() + l2) / 2.0).abs() < 1e-14);
    assert!((d.at(0, 1) - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-15);
    assert!(d.row(1).iter().sum::<f64>().abs() < 1e-15);
    assert!(cross_entropy_loss(&logits, &[0]).is_err());
    assert!(cross_entropy_loss(&logits, &[0, 3]).is_err());
    // Large logits stay finite.
    let big = Mat::from_vec(1, 2, vec![1000.0, 0.0]);
    assert!(cross_entropy_loss(&big, &[1]).unwrap().0.is_finite());
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = tiny();
    let model = Transformer::new(cfg.clone()).unwrap();
    let layout = model.layout().clone();
    let params = random_params(&layout, 7);
    let batch = random_batch(&cfg, 2, 8);
    let full = IndexSet::full(&layout);
    let (_, grads) = model
        .loss_and_grad(&params, &batch, &full, &JacobianPlan::Full)
        .unwrap();
    let dense = grads.to_dense(&layout);
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for spec in layout.tensors() {
        let picks: Vec<usize> = (0..6).map(|_| spec.offset + rng.random_range(0..spec.len())).collect();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for &i in &picks {
            let mut plus = params.clone();
            plus.values[i] += eps;
            let mut minus = params.clone();
            minus.values[i] -= eps;
            let fd = (model.loss(&plus, &batch).unwrap() - model.loss(&minus, &batch).unwrap())
                / (2.0 * eps);
            num += (fd - dense[i]).powi(2);
            den += fd.powi(2);
        }
        let rel = num.sqrt() / den.sqrt().max(1e-8);
        assert!(rel < 1e-4, "{}: relative error {rel}", spec.label());
    }
}

#[test]
fn restricted_gradients_are_bitwise_subsets() {
    let cfg = ModelConfig::new(2, 8, 4, 11, 5);
    let model = Transformer::new(cfg.clone()).unwrap();
    let layout = model.layout().clone();
    let params = random_params(&layout, 11);
    let batch = random_batch(&cfg, 2, 12);
    let full = IndexSet::full(&layout);
    let (_, g_full) = model
        .loss_and_grad(&params, &batch, &full, &JacobianPlan::Full)
        .unwrap();
    for strategy in [SliceStrategy::MlpOnly, SliceStrategy::MlpHeadsAndWo, SliceStrategy::ByLayers] {
        let plan = build_slice_plan(&cfg, 2, 2, strategy).unwrap();
        for node in 0..2 {
            let set = plan.trainable(node);
            let (_, g) = model
                .loss_and_grad(&params, &batch, set, &JacobianPlan::Full)
                .unwrap();
            for id in set.iter_ids(&layout) {
                assert_eq!(
                    g.get(&layout, id).to_bits(),
                    g_full.get(&layout, id).to_bits(),
                    "{strategy:?} node {node} param {id}"
                );
            }
            for id in plan.frozen(node).iter_ids(&layout) {
                assert_eq!(g.try_get(&layout, id), None);
            }
        }
    }
}

#[test]
fn frozen_heads_get_no_gradient() {
    let cfg = ModelConfig::new(1, 8, 4, 11, 5);
    let model = Transformer::new(cfg.clone()).unwrap();
    let layout = model.layout().clone();
    let plan = build_slice_plan(&cfg, 2, 2, SliceStrategy::MlpAndHeads).unwrap();
    let params = random_params(&layout, 13);
    let batch = random_batch(&cfg, 2, 14);
    let (_, g) = model
        .loss_and_grad(&params, &batch, plan.trainable(0), &JacobianPlan::Full)
        .unwrap();
    let (_, g_full) = model
        .loss_and_grad(&params, &batch, &IndexSet::full(&layout), &JacobianPlan::Full)
        .unwrap();
    let q = layout.spec(TensorKind::Query, Some(0)).clone();
    let frozen_heads = head_group(4, 2, 1);
    let mut nonzero_in_full = false;
    for r in 0..q.rows {
        for head in frozen_heads.clone() {
            for c in head * cfg.head_dim..(head + 1) * cfg.head_dim {
                let id = ParamId(q.offset + r * q.cols + c);
                assert_eq!(g.get(&layout, id), 0.0);
                assert_eq!(g.try_get(&layout, id), None);
                nonzero_in_full |= g_full.get(&layout, id) != 0.0;
            }
        }
    }
    assert!(nonzero_in_full);
    assert_eq!(g.to_dense(&layout).len(), layout.len());
}

#[test]
fn detach_modes() {
    let cfg = tiny();
    let model = Transformer::new(cfg.clone()).unwrap();
    let layout = model.layout().clone();
    let params = random_params(&layout, 15);
    let batch = random_batch(&cfg, 2, 16);
    let full = IndexSet::full(&layout);
    let grad = |plan: &JacobianPlan| {
        model.loss_and_grad(&params, &batch, &full, plan).unwrap().1.to_dense(&layout)
    };
    let g_full = grad(&JacobianPlan::Full);

    // Keeping every slice is the full Jacobian.
    let all = JacobianPlan::resolve(BackwardMode::DetachKPlusRandom, 2, 0, Some(1)).unwrap();
    assert_eq!(grad(&all), g_full);

    // Dropping a slice changes gradients below the last MLP but not the
    // last MLP's own weights.
    let own = JacobianPlan::resolve(BackwardMode::DetachAllButK, 2, 0, None).unwrap();
    let g_own = grad(&own);
    let last_up = layout.spec(TensorKind::MlpUp, Some(1)).range();
    assert_eq!(g_own[last_up.clone()], g_full[last_up]);
    let first_up = layout.spec(TensorKind::MlpUp, Some(0)).range();
    assert_ne!(g_own[first_up.clone()], g_full[first_up]);

    for mode in [BackwardMode::DetachAllButK, BackwardMode::DetachKPlusRandom] {
        assert!(matches!(
            JacobianPlan::resolve(mode, 1, 0, Some(0)),
            Err(Error::Config { .. })
        ));
    }
    assert!(JacobianPlan::resolve(BackwardMode::DetachKPlusRandom, 4, 2, Some(2)).is_err());
    assert_eq!(
        JacobianPlan::resolve(BackwardMode::FullJacobian, 1, 0, None).unwrap(),
        JacobianPlan::Full
    );
}

#[test]
fn bad_inputs_rejected() {
    let cfg = tiny();
    let model = Transformer::new(cfg.clone()).unwrap();
    let params = ModelParams::zeros(model.layout());
    assert!(matches!(
        model.forward_tokens(&params, 1, &[11]),
        Err(Error::Config { .. })
    ));
    assert!(model.forward_tokens(&params, 1, &[0; 6]).is_err());
    assert!(matches!(
        model.forward_tokens(&ModelParams { values: vec![0.0; 3] }, 1, &[0]),
        Err(Error::Shape(_))
    ));
    let mut huge = ModelParams::init(model.layout(), 1, 1e200);
    huge.values.iter_mut().for_each(|v| *v *= 1e200);
    assert!(matches!(
        model.forward_tokens(&huge, 1, &[1, 2]),
        Err(Error::NumericalOverflow { .. })
    ));
}
