use super::*;
use crate::gates::{GateConfig, GateVariant, GateWeights};
use crate::numkern::{finite_diff_grad, max_rel_error, Activation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 16,
        d_head: 4,
        d_ff: 12,
        vocab_size: 11,
        max_seq: 32,
        rope_theta: 100.0,
        activation: Activation::Silu,
        gate: GateConfig {
            hidden: 6,
            init_std: 0.4,
            bias_init: 1.5,
            ..GateConfig::default()
        },
        use_scale: true,
        norm_eps: 1e-6,
        attn_tile: 3,
        init_std: 0.4,
    }
}

fn tiny_model(seed: u64) -> (Model<f64>, Vec<GateParams<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::init(tiny_config(), &mut rng).unwrap();
    let gates = model.init_gates(&mut rng).unwrap();
    (model, gates)
}

fn set_bias<T: Real>(gates: &mut [GateParams<T>], value: f64) {
    for g in gates {
        g.bias.data_mut().iter_mut().for_each(|b| *b = T::of(value));
    }
}

#[test]
fn default_config_is_valid() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.d_model, 128);
    assert_eq!(cfg.group_size(), 2);
    let bad = ModelConfig {
        n_kv_heads: 3,
        ..ModelConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = ModelConfig {
        d_head: 15,
        d_model: 120,
        ..ModelConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn forward_is_deterministic_and_order_sensitive() {
    let (model, _) = tiny_model(1);
    let a = model.forward_teacher(&[1, 4, 2, 7]).unwrap();
    let b = model.forward_teacher(&[1, 4, 2, 7]).unwrap();
    assert_eq!(a.logits, b.logits);
    let swapped = model.forward_teacher(&[4, 1, 2, 7]).unwrap();
    assert_ne!(a.logits.row(3), swapped.logits.row(3));
    assert!(a.retention.is_none());
}

#[test]
fn bad_tokens_are_rejected() {
    let (model, _) = tiny_model(1);
    assert!(matches!(model.forward_teacher(&[1, 11]), Err(Error::Index { index: 11, .. })));
    assert!(model.forward_teacher(&vec![0; 33]).is_err());
}

#[test]
fn saturated_gates_reproduce_the_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig {
        vocab_size: 64,
        ..tiny_config()
    };
    let model = Model::<f32>::init(cfg, &mut rng).unwrap();
    let mut gates = model.init_gates(&mut rng).unwrap();
    set_bias(&mut gates, 40.0);
    let tokens: Vec<usize> = (0..24).map(|i| (i * 7 + 3) % 64).collect();
    let teacher = model.forward_teacher(&tokens).unwrap();
    let student = model.forward_student(&tokens, &gates).unwrap();
    assert!(student.logits.max_abs_diff(&teacher.logits) <= 1e-4);
}

#[test]
fn student_reports_retention_per_layer() {
    let (model, gates) = tiny_model(2);
    let tokens: Vec<usize> = (0..16).map(|i| i % 11).collect();
    let out = model.forward_student(&tokens, &gates).unwrap();
    let retention = out.retention.unwrap();
    assert_eq!(retention.len(), 2);
    for r in &retention {
        assert_eq!(r.betas.shape(), &[16, 2]);
        assert!(r.betas.data().iter().all(|&b| b > 0.0 && b < 1.0));
    }
    let teacher = model.forward_teacher(&tokens).unwrap();
    assert!(student_differs(&teacher.logits, &out.logits));
}

fn student_differs(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.max_abs_diff(b) > 1e-9
}

#[test]
fn query_heads_in_a_group_share_retention() {
    let (model, gates) = tiny_model(3);
    let tokens = [0, 5, 9, 2, 2, 8];
    let (_, tape) = model.forward_taped(&tokens, Some(&gates)).unwrap();
    let lt = &tape.layers[0];
    let r = lt.gate.as_ref().map(|g| &g.0);
    let scale = model.config.scale();
    for h in 0..model.config.n_heads {
        let first = model.config.kv_head_of(h) * model.config.group_size();
        let a = model.head_input(&lt.q, &lt.k, &lt.v, r, h, scale).unwrap();
        let b = model.head_input(&lt.q, &lt.k, &lt.v, r, first, scale).unwrap();
        assert_eq!(a.log_betas(), b.log_betas());
        assert_eq!(a.k, b.k);
    }
}

#[test]
fn fully_forgetting_gates_keep_only_the_diagonal_logit() {
    let (model, mut gates) = tiny_model(4);
    set_bias(&mut gates, -500.0);
    for g in gates.iter_mut() {
        if let GateWeights::Mlp { w_out, .. } = &mut g.weights {
            w_out.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
    }
    let tokens = [3, 1, 4];
    let (_, tape) = model.forward_taped(&tokens, Some(&gates)).unwrap();
    let lt = &tape.layers[1];
    let dh = model.config.d_head;
    for h in 0..model.config.n_heads {
        let g = model.config.kv_head_of(h);
        let out = lt.attn_cat.col_block(h * dh, dh);
        // oracle: off-diagonal factors are 0, so off-diagonal logits vanish
        for t in 0..3 {
            let qt = &lt.q.row(t)[h * dh..(h + 1) * dh];
            let diag: f64 = (0..dh).map(|c| qt[c] * lt.k.row(t)[g * dh + c]).sum::<f64>() * model.config.scale();
            let mut weights = vec![1.0; t + 1];
            weights[t] = diag.exp();
            let z: f64 = weights.iter().sum();
            for c in 0..dh {
                let expect: f64 = (0..=t).map(|i| weights[i] / z * lt.v.row(i)[g * dh + c]).sum();
                assert!((out.at(t, c) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backward_matches_finite_differences_through_every_layer() {
    let (model, gates) = tiny_model(6);
    let tokens = [2, 7, 1, 9, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let upstream = Tensor::<f64>::randn(&[5, 11], 1.0, &mut rng);
    let extra: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::randn(&[5, 2], 0.3, &mut rng)).collect();
    let loss = |m: &Model<f64>, g: &[GateParams<f64>]| {
        let out = m.forward_student(&tokens, g).unwrap();
        let mut total: f64 = out.logits.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum();
        for (r, e) in out.retention.unwrap().iter().zip(&extra) {
            total += r.log_betas.data().iter().zip(e.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        total
    };
    let (_, tape) = model.forward_taped(&tokens, Some(&gates)).unwrap();
    let grads = model
        .backward(&tape, Some(&gates), &upstream, Some(&extra), BackwardRequest { weights: true, gates: true })
        .unwrap();

    let wg = grads.weights.unwrap();
    for ((name, analytic), (_, theta)) in wg.named().into_iter().zip(model.weights.named()) {
        let theta = theta.clone();
        let fd = finite_diff_grad(
            |x| {
                let mut m = model.clone();
                for (n2, t) in m.weights.named_mut() {
                    if n2 == name {
                        *t = x.clone();
                    }
                }
                loss(&m, &gates)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        let err = max_rel_error(analytic.data(), fd.data(), 1e-3);
        assert!(err < 1e-4, "{name}: {err}");
    }

    let gg = grads.gates.unwrap();
    for l in 0..2 {
        for (ix, (name, analytic)) in gg[l].tensors().into_iter().enumerate() {
            let theta = gates[l].tensors()[ix].1.clone();
            let fd = finite_diff_grad(
                |x| {
                    let mut g2 = gates.clone();
                    *g2[l].tensors_mut()[ix] = x.clone();
                    loss(&model, &g2)
                },
                &theta,
                1e-5,
            )
            .unwrap();
            let err = max_rel_error(analytic.data(), fd.data(), 1e-3);
            assert!(err < 1e-4, "gate {l} {name}: {err}");
        }
    }
}

#[test]
fn linear_gates_also_backpropagate() {
    let mut cfg = tiny_config();
    cfg.gate.variant = GateVariant::Linear;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Model::<f64>::init(cfg, &mut rng).unwrap();
    let gates = model.init_gates(&mut rng).unwrap();
    let tokens = [4, 4, 0, 10];
    let upstream = Tensor::<f64>::randn(&[4, 11], 1.0, &mut rng);
    let (_, tape) = model.forward_taped(&tokens, Some(&gates)).unwrap();
    let grads = model
        .backward(&tape, Some(&gates), &upstream, None, BackwardRequest { weights: false, gates: true })
        .unwrap();
    assert!(grads.weights.is_none());
    let gg = grads.gates.unwrap();
    let bias = gates[0].bias.clone();
    let fd = finite_diff_grad(
        |x| {
            let mut g2 = gates.clone();
            g2[0].bias = x.clone();
            let out = model.forward_student(&tokens, &g2).unwrap();
            out.logits.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        },
        &bias,
        1e-5,
    )
    .unwrap();
    assert!(max_rel_error(gg[0].bias.data(), fd.data(), 1e-3) < 1e-4);
}
