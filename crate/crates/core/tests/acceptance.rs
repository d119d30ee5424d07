//! Acceptance criteria P1–P9. Everything runs inside one test so the timing
//! measurements of P9 never compete with other tests in this binary. Each
//! criterion prints a single PASS/FAIL line; the test fails if any does.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trimkv::analysis::{deviation_vs_budget, mean_retention, EvalReport};
use trimkv::attnkern::{causal_attention_fwd, gated_attention_bwd, gated_attention_fwd, gated_attention_tiled, AttnInput};
use trimkv::cache::{
    oracle_optimal_eviction, random_instances, simulate_policy, step_time_profile, DecodeOptions, Decoder, Policy,
};
use trimkv::gates::{gate_backward, gate_forward, gate_forward_taped, LOGIT_MAX};
use trimkv::losses::{capacity_loss_grad, capacity_loss_tiled, kl_distill, kl_distill_grad, ntp_loss, ntp_loss_grad};
use trimkv::model::BackwardRequest;
use trimkv::numkern::{finite_diff_grad, max_rel_error, Tensor};
use trimkv::tasks::TaskSample;
use trimkv::train::{held_out, train_gates, train_teacher, Checkpoint, RunConfig};
use trimkv::{GateConfig, GateParams, KlDirection, Model, ModelConfig};

struct Verdict {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: &'static str, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (pass, detail) = f();
    let secs = start.elapsed().as_secs_f64();
    println!("{id} {} ({secs:.1}s) {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, pass, detail }
}

/// Relative error with a magnitude floor of 1e−3 below which differences are
/// compared absolutely.
fn rel(a: &[f64], b: &[f64]) -> f64 {
    max_rel_error(a, b, 1e-3)
}

// ---------------------------------------------------------------- P1

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn attention_error(rng: &mut ChaCha8Rng, n: usize, d: usize) -> f64 {
    let q = Tensor::randn(&[n, d], 1.0, rng);
    let k = Tensor::randn(&[n, d], 1.0, rng);
    let v = Tensor::randn(&[n, d], 1.0, rng);
    let betas: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.995)).collect();
    let up = Tensor::randn(&[n, d], 1.0, rng);
    let scale = 1.0 / (d as f64).sqrt();
    let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, b: &[f64]| {
        let input = AttnInput::new(q.clone(), k.clone(), v.clone(), scale).unwrap().with_betas(b).unwrap();
        inner(&gated_attention_fwd(&input).unwrap(), &up)
    };
    let input = AttnInput::new(q.clone(), k.clone(), v.clone(), scale).unwrap().with_betas(&betas).unwrap();
    let g = gated_attention_bwd(&input, &up).unwrap();
    let h = 1e-5;
    let fq = finite_diff_grad(|x| loss(x, &k, &v, &betas), &q, h).unwrap();
    let fk = finite_diff_grad(|x| loss(&q, x, &v, &betas), &k, h).unwrap();
    let fv = finite_diff_grad(|x| loss(&q, &k, x, &betas), &v, h).unwrap();
    let fb = finite_diff_grad(|x| loss(&q, &k, &v, x.data()), &Tensor::from_vec(betas.clone()), h).unwrap();
    [
        rel(g.q.data(), fq.data()),
        rel(g.k.data(), fk.data()),
        rel(g.v.data(), fv.data()),
        rel(g.beta.as_ref().unwrap(), fb.data()),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn gate_error(rng: &mut ChaCha8Rng, n: usize, d: usize) -> f64 {
    let config = GateConfig {
        hidden: 6,
        init_std: 0.5,
        bias_init: 0.3,
        ..GateConfig::default()
    };
    let p = GateParams::<f64>::init(&config, d, 2, rng).unwrap();
    let x = Tensor::randn(&[n, d], 1.0, rng);
    let up = Tensor::randn(&[n, 2], 1.0, rng);
    let loss = |x: &Tensor<f64>, p: &GateParams<f64>| inner(&gate_forward(x, p).unwrap().log_betas, &up);
    let (_, tape) = gate_forward_taped(&x, &p).unwrap();
    let (gx, gp) = gate_backward(&x, &p, &tape, &up).unwrap();
    let mut worst = rel(gx.data(), finite_diff_grad(|v| loss(v, &p), &x, 1e-5).unwrap().data());
    for (ix, (_, g)) in gp.tensors().into_iter().enumerate() {
        let theta = p.tensors()[ix].1.clone();
        let fd = finite_diff_grad(
            |v| {
                let mut q = p.clone();
                *q.tensors_mut()[ix] = v.clone();
                loss(&x, &q)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        worst = worst.max(rel(g.data(), fd.data()));
    }
    worst
}

fn loss_error(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> f64 {
    let p = Tensor::randn(&[n, vocab], 1.5, rng);
    let q = Tensor::randn(&[n, vocab], 1.5, rng);
    let mut worst: f64 = 0.0;
    for dir in [KlDirection::Forward, KlDirection::Reverse] {
        let (_, g) = kl_distill_grad(&p, &q, dir).unwrap();
        let fd = finite_diff_grad(|x| kl_distill(&p, x, dir).unwrap(), &q, 1e-5).unwrap();
        worst = worst.max(rel(g.data(), fd.data()));
    }
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let (_, g) = ntp_loss_grad(&q, &targets).unwrap();
    let fd = finite_diff_grad(|x| ntp_loss(x, &targets).unwrap(), &q, 1e-5).unwrap();
    worst = worst.max(rel(g.data(), fd.data()));

    let lbs: Vec<f64> = (0..n).map(|_| rng.random_range(0.3f64..0.999).ln()).collect();
    let m = rng.random_range(1..n.max(2));
    let tile = rng.random_range(1..=n);
    let (_, g) = capacity_loss_grad(&lbs, m, tile).unwrap();
    let fd = finite_diff_grad(|x| capacity_loss_tiled(x.data(), m, tile).unwrap(), &Tensor::from_vec(lbs), 1e-5).unwrap();
    worst.max(rel(&g, fd.data()))
}

/// Gate gradients through the whole gated student, as training uses them.
fn student_error(seed: u64) -> f64 {
    let mut cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        n_kv_heads: 1,
        d_model: 8,
        d_head: 4,
        d_ff: 10,
        vocab_size: 11,
        max_seq: 16,
        rope_theta: 100.0,
        attn_tile: 3,
        init_std: 0.4,
        ..ModelConfig::default()
    };
    cfg.gate.hidden = 5;
    cfg.gate.init_std = 0.4;
    cfg.gate.bias_init = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::init(cfg, &mut rng).unwrap();
    let gates = model.init_gates(&mut rng).unwrap();
    let tokens: Vec<usize> = (0..6).map(|_| rng.random_range(0..11)).collect();
    let up = Tensor::<f64>::randn(&[6, 11], 1.0, &mut rng);
    let loss = |g: &[GateParams<f64>]| inner(&model.forward_student(&tokens, g).unwrap().logits, &up);
    let (_, tape) = model.forward_taped(&tokens, Some(&gates)).unwrap();
    let grads = model
        .backward(&tape, Some(&gates), &up, None, BackwardRequest { weights: false, gates: true })
        .unwrap()
        .gates
        .unwrap();
    let mut worst: f64 = 0.0;
    for l in 0..2 {
        for (ix, (_, analytic)) in grads[l].tensors().into_iter().enumerate() {
            let theta = gates[l].tensors()[ix].1.clone();
            let fd = finite_diff_grad(
                |x| {
                    let mut g2 = gates.clone();
                    *g2[l].tensors_mut()[ix] = x.clone();
                    loss(&g2)
                },
                &theta,
                1e-5,
            )
            .unwrap();
            worst = worst.max(rel(analytic.data(), fd.data()));
        }
    }
    worst
}

fn p1() -> (bool, String) {
    let (mut attn, mut gate, mut losses, mut student) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let instances = 100;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        attn = attn.max(attention_error(&mut rng, n, d));
        gate = gate.max(gate_error(&mut rng, n, d));
        let vocab = rng.random_range(2..=16);
        losses = losses.max(loss_error(&mut rng, n, vocab));
        if seed % 10 == 0 {
            student = student.max(student_error(seed));
        }
    }
    let worst = attn.max(gate).max(losses).max(student);
    (
        worst < 1e-4,
        format!(
            "{instances} instances; worst relative error attention {attn:.1e}, gate {gate:.1e}, losses {losses:.1e}, student {student:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- P2

fn p2() -> (bool, String) {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 32,
        d_head: 8,
        d_ff: 64,
        vocab_size: 48,
        max_seq: 128,
        init_std: 0.1,
        ..ModelConfig::default()
    };
    let mut logit_gap: f64 = 0.0;
    let mut min_beta_gap = f64::INFINITY;
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::<f32>::init(cfg.clone(), &mut rng).unwrap();
        let mut gates = model.init_gates(&mut rng).unwrap();
        for g in &mut gates {
            g.bias.data_mut().iter_mut().for_each(|b| *b = LOGIT_MAX as f32);
        }
        let tokens: Vec<usize> = (0..96).map(|_| rng.random_range(0..48)).collect();
        let student = model.forward_student(&tokens, &gates).unwrap();
        for r in student.retention.as_ref().unwrap() {
            for &lb in r.log_betas.data() {
                min_beta_gap = min_beta_gap.min(-(lb as f64).exp_m1());
            }
        }
        let teacher = model.forward_teacher(&tokens).unwrap();
        logit_gap = logit_gap.max(student.logits.max_abs_diff(&teacher.logits) as f64);
    }
    let precondition = min_beta_gap <= 1e-9;

    let mut attn_gap: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, d) = (rng.random_range(1..=128), rng.random_range(1..=16));
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        let betas: Vec<f64> = (0..n).map(|_| 1.0 - rng.random_range(0.0..1e-9)).collect();
        let plain = AttnInput::new(q, k, v, 1.0 / (d as f64).sqrt()).unwrap();
        let gated = plain.clone().with_betas(&betas).unwrap();
        let a = causal_attention_fwd(&plain).unwrap();
        let b = gated_attention_fwd(&gated).unwrap();
        attn_gap = attn_gap.max(a.max_abs_diff(&b));
    }
    (
        precondition && logit_gap <= 1e-4 && attn_gap <= 1e-6,
        format!("1−β ≤ {min_beta_gap:.1e}; student−teacher logits {logit_gap:.1e}; gated−vanilla attention {attn_gap:.1e}"),
    )
}

// ---------------------------------------------------------------- P3

fn naive_gated(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, scale: f64, betas: &[f64]) -> Tensor<f64> {
    let (n, d) = (q.rows(), q.cols());
    let mut out = Tensor::zeros(&[n, d]);
    for t in 0..n {
        let logits: Vec<f64> = (0..=t)
            .map(|i| {
                let raw: f64 = (0..d).map(|c| q.at(t, c) * k.at(i, c)).sum::<f64>() * scale;
                betas[i].powi((t - i) as i32) * raw
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..d {
            out.set(t, c, (0..=t).map(|i| w[i] / z * v.at(i, c)).sum());
        }
    }
    out
}

fn naive_capacity(betas: &[f64], m: usize) -> f64 {
    let n = betas.len();
    if n <= m {
        return 0.0;
    }
    let excess: f64 = (0..n)
        .map(|t| {
            let p: f64 = (0..=t).map(|i| betas[i].powi((t - i) as i32)).sum();
            (p - m as f64).max(0.0)
        })
        .sum();
    excess / (n as f64 * (n - m) as f64)
}

fn p3() -> (bool, String) {
    let mut attn_gap: f64 = 0.0;
    let mut cap_gap: f64 = 0.0;
    let mut cases = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [1usize, 2, 5, 17, 64, 100, 256] {
        let d = 8;
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        let betas: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..0.9999)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        let reference = naive_gated(&q, &k, &v, scale, &betas);
        let input = AttnInput::new(q, k, v, scale).unwrap().with_betas(&betas).unwrap();
        let lbs: Vec<f64> = betas.iter().map(|b| b.ln()).collect();
        let m = (n / 4).max(1);
        let cap_ref = naive_capacity(&betas, m);
        for tile in [1, 2, 7, 32, n] {
            attn_gap = attn_gap.max(gated_attention_tiled(&input, tile).unwrap().max_abs_diff(&reference));
            cap_gap = cap_gap.max((capacity_loss_tiled(&lbs, m, tile).unwrap() - cap_ref).abs());
            cases += 1;
        }
    }
    (
        attn_gap <= 1e-5 && cap_gap <= 1e-8,
        format!("{cases} (T, tile) cases; attention gap {attn_gap:.1e}, capacity gap {cap_gap:.1e}"),
    )
}

// ---------------------------------------------------------------- P4

fn p4() -> (bool, String) {
    let ones = capacity_loss_tiled(&[0.0f64; 4], 2, 64).unwrap();
    let near_ones = capacity_loss_tiled(&[(1.0f64 - 1e-12).ln(); 4], 2, 64).unwrap();
    let zeros = capacity_loss_tiled(&[-69.0f64; 4], 2, 64).unwrap();
    let closed = (ones - 0.375).abs() <= 1e-9 && (near_ones - 0.375).abs() <= 1e-9 && zeros.abs() <= 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut agree, mut zero_cases) = (0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=40);
        let m = rng.random_range(1..=n + 2);
        let hi = if rng.random_bool(0.5) { 0.999999 } else { 0.9 };
        let betas: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..hi)).collect();
        let lbs: Vec<f64> = betas.iter().map(|b| b.ln()).collect();
        let loss = capacity_loss_tiled(&lbs, m, rng.random_range(1..=n)).unwrap();
        let within = (0..n).all(|t| (0..=t).map(|i| betas[i].powi((t - i) as i32)).sum::<f64>() <= m as f64);
        zero_cases += usize::from(within);
        agree += usize::from((loss == 0.0) == within);
    }
    (
        closed && agree == 1000,
        format!(
            "β→1: {ones} / {near_ones}; β→0: {zeros}; hinge-zero agreement {agree}/1000 ({zero_cases} within budget)"
        ),
    )
}

// ---------------------------------------------------------------- P5

fn p5() -> (bool, String) {
    let mut cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 16,
        d_head: 4,
        d_ff: 24,
        vocab_size: 20,
        max_seq: 256,
        ..ModelConfig::default()
    };
    cfg.gate.hidden = 6;
    cfg.gate.bias_init = 1.0;
    cfg.gate.init_std = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::<f32>::init(cfg, &mut rng).unwrap();
    let gates = model.init_gates(&mut rng).unwrap();
    let options = DecodeOptions {
        trace: true,
        ..DecodeOptions::default()
    };

    let (mut steps, mut runs) = (0usize, 0usize);
    let (mut over_budget, mut newest_lost, mut non_monotone, mut prefill_mismatch) = (0, 0, 0, 0);
    while steps < 10_000 {
        let m = rng.random_range(3..=16);
        let policy = match runs % 5 {
            0 => Policy::TrimKv,
            1 => Policy::RecencyWindow,
            2 => Policy::SinkWindow { sinks: rng.random_range(1..m) },
            3 => Policy::H2o { recent: None },
            _ => Policy::Random { seed: rng.random() },
        };
        let len = rng.random_range(m..=160);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..20)).collect();
        let mut dec = Decoder::new(&model, Some(&gates), Some(m), policy, options).unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            dec.decode_step(tok).unwrap();
            let cache = dec.cache();
            for l in 0..2 {
                for g in 0..2 {
                    let head = cache.head(l, g);
                    over_budget += usize::from(head.len() > m);
                    newest_lost += usize::from(head.positions().last() != Some(&t));
                }
            }
            steps += 1;
        }
        let trace = dec.into_trace().unwrap();
        non_monotone += usize::from(!trace.is_monotone());
        let mut pre = Decoder::new(&model, Some(&gates), Some(m), policy, options).unwrap();
        pre.chunked_prefill(&tokens, 1).unwrap();
        prefill_mismatch += usize::from(pre.into_trace().unwrap() != trace);
        runs += 1;
    }
    (
        over_budget + newest_lost + non_monotone + prefill_mismatch == 0,
        format!(
            "{steps} steps over {runs} runs; over budget {over_budget}, newest evicted {newest_lost}, \
             non-monotone traces {non_monotone}, prefill≠decode {prefill_mismatch}"
        ),
    )
}

// ---------------------------------------------------------------- P6

fn p6() -> (bool, String) {
    let (t, m, d) = (10, 3, 4);
    let instances = random_instances(100, t, d, 6);
    let (mut wins, mut below_optimum) = (0, 0);
    let (mut trim_total, mut random_total, mut oracle_total) = (0.0, 0.0, 0.0);
    for inst in &instances {
        let trim = simulate_policy(inst, m, Policy::TrimKv).unwrap().deviation;
        let oracle = oracle_optimal_eviction(inst, m).unwrap();
        wins += usize::from(trim <= oracle.mean_deviation);
        below_optimum += usize::from(trim < oracle.deviation - 1e-9);
        trim_total += trim;
        random_total += oracle.mean_deviation;
        oracle_total += oracle.deviation;
    }
    let n = instances.len() as f64;
    (
        wins >= 90 && below_optimum == 0,
        format!(
            "trimkv ≤ random mean on {wins}/100; below optimum on {below_optimum}; mean deviation trimkv {:.4}, random {:.4}, optimal {:.4}",
            trim_total / n,
            random_total / n,
            oracle_total / n
        ),
    )
}

// ---------------------------------------------------------------- P7 / P8

fn recipe(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

struct Experiment {
    teacher: Checkpoint,
    gate_cfg: RunConfig,
    samples: Vec<TaskSample>,
    budget: usize,
}

fn find<'a>(reports: &'a [EvalReport], policy: &str, budget: Option<usize>) -> &'a EvalReport {
    reports
        .iter()
        .find(|r| r.budget == budget && (budget.is_none() || r.policy.starts_with(policy)))
        .expect("report present")
}

fn compare(model: &Model<f32>, gates: &[GateParams<f32>], exp: &Experiment) -> Vec<EvalReport> {
    let policies = [Policy::TrimKv, Policy::RecencyWindow, Policy::Random { seed: 7 }];
    deviation_vs_budget(model, Some(gates), &exp.samples, &policies, &[Some(exp.budget), None], 1).unwrap()
}

fn p7() -> ((bool, String), Option<Experiment>) {
    let teacher_cfg = RunConfig::from_file(&recipe("teacher_ar.conf")).unwrap();
    let mut gate_cfg = RunConfig::from_file(&recipe("gates_ar.conf")).unwrap();
    gate_cfg.set("eval_every", "0").unwrap();

    let start = Instant::now();
    let teacher = train_teacher(&teacher_cfg, &mut |_| {}).unwrap();
    let teacher_secs = start.elapsed().as_secs_f64();
    let teacher_acc = teacher.final_accuracy().unwrap_or(0.0);

    let start = Instant::now();
    let trained = train_gates(&gate_cfg, &teacher.checkpoint, &mut |_| {}).unwrap();
    let gate_secs = start.elapsed().as_secs_f64();

    let task = gate_cfg.task.clone();
    let exp = Experiment {
        samples: held_out(&task, 0xACCE_97, 200).unwrap(),
        budget: gate_cfg.train.budget.resolve(task.seq_len()),
        teacher: teacher.checkpoint,
        gate_cfg,
    };
    let ck = &trained.checkpoint;
    let reports = compare(&ck.model, ck.gates().unwrap(), &exp);
    let acc = |p: &str| find(&reports, p, Some(exp.budget)).accuracy;
    let (trim, recency, random) = (acc("trimkv"), acc("recency"), acc("random"));
    let full = find(&reports, "", None).accuracy;
    let pass = teacher_acc >= 0.95
        && teacher_secs <= 15.0 * 60.0
        && gate_secs <= 30.0 * 60.0
        && trim - recency >= 0.10
        && trim - random >= 0.10
        && trim >= 0.9 * full;
    let detail = format!(
        "teacher {teacher_acc:.3} in {teacher_secs:.0}s, gates in {gate_secs:.0}s; M={} accuracy trimkv {trim:.3}, \
         recency {recency:.3}, random {random:.3}, full {full:.3}",
        exp.budget
    );
    ((pass, detail), Some(exp))
}

fn ablation(exp: &Experiment, key: &str) -> (Model<f32>, Vec<GateParams<f32>>) {
    let mut cfg = exp.gate_cfg.clone();
    cfg.set(key, "false").unwrap();
    let ck = train_gates(&cfg, &exp.teacher, &mut |_| {}).unwrap().checkpoint;
    let gates = ck.gates().unwrap().to_vec();
    (ck.model, gates)
}

fn p8(exp: &Experiment) -> (bool, String) {
    let (model, gates) = ablation(exp, "use_cap");
    let beta = mean_retention(&model, &gates, &exp.samples).unwrap();
    let reports = compare(&model, &gates, exp);
    let (t, r) = (find(&reports, "trimkv", Some(exp.budget)), find(&reports, "random", Some(exp.budget)));
    let se = (t.se_deviation.powi(2) + r.se_deviation.powi(2)).sqrt();
    let no_cap = beta >= 0.99 && (t.mean_deviation - r.mean_deviation).abs() <= se;
    let mut detail = format!(
        "−cap: mean β {beta:.4}, deviation trimkv {:.1} vs random {:.1} (s.e. {se:.1}), accuracy {:.3} vs {:.3}",
        t.mean_deviation, r.mean_deviation, t.accuracy, r.accuracy
    );
    let mut pass = no_cap;
    for key in ["use_kl", "use_ntp"] {
        let (model, gates) = ablation(exp, key);
        let reports = compare(&model, &gates, exp);
        let (t, r) = (find(&reports, "trimkv", Some(exp.budget)), find(&reports, "random", Some(exp.budget)));
        pass &= t.accuracy - r.accuracy >= 0.05;
        detail += &format!("; −{}: trimkv {:.3} vs random {:.3}", &key[4..], t.accuracy, r.accuracy);
    }
    (pass, detail)
}

// ---------------------------------------------------------------- P9

fn window_median(profile: &[f64], center: usize, half: usize) -> f64 {
    let mut w = profile[center - half..center + half].to_vec();
    w.sort_by(f64::total_cmp);
    w[w.len() / 2]
}

fn p9() -> (bool, String) {
    let m = 128;
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 64,
        d_head: 16,
        d_ff: 128,
        vocab_size: 64,
        max_seq: 4 * m + 64,
        init_std: 0.1,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = Model::<f32>::init(cfg, &mut rng).unwrap();
    let gates = model.init_gates(&mut rng).unwrap();
    let steps = 4 * m + 32;
    let half = 16;
    let profile = |budget| step_time_profile(&model, Some(&gates), Policy::TrimKv, budget, steps, 7, 1).unwrap();
    let bounded = profile(Some(m));
    let full = profile(None);
    let bounded_ratio = window_median(&bounded, 4 * m, half) / window_median(&bounded, m + half, half);
    let full_ratio = window_median(&full, 4 * m, half) / window_median(&full, m + half, half);
    (
        bounded_ratio <= 1.2 && full_ratio >= 1.5,
        format!("M={m}: step time t=4M / t=M bounded {bounded_ratio:.2}, full {full_ratio:.2}"),
    )
}

#[test]
fn acceptance() {
    let mut verdicts = vec![
        report("P1", p1),
        report("P2", p2),
        report("P3", p3),
        report("P4", p4),
        report("P5", p5),
        report("P6", p6),
    ];
    let mut experiment = None;
    verdicts.push(report("P7", || {
        let (verdict, exp) = p7();
        experiment = exp;
        verdict
    }));
    let exp = experiment.expect("P7 trains the recipe");
    verdicts.push(report("P8", || p8(&exp)));
    verdicts.push(report("P9", p9));

    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| format!("{}: {}", v.id, v.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
