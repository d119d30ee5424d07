use super::*;
use crate::losses::capacity_loss;

fn teacher_cfg(steps: usize) -> RunConfig {
    RunConfig::parse(&format!(
        "stage = teacher
         task = recall:n_pairs=2,seq_len=12,vocab=16
         steps = {steps}
         lr = 3e-3
         seed = 11
         eval_samples = 32
         model.n_layers = 1
         model.n_heads = 2
         model.n_kv_heads = 1
         model.d_model = 16
         model.d_head = 8
         model.d_ff = 32"
    ))
    .unwrap()
}

fn gate_cfg(steps: usize, extra: &str) -> RunConfig {
    RunConfig::parse(&format!(
        "stage = gates
         task = recall:n_pairs=2,seq_len=12,vocab=16
         teacher = unused.ckpt
         steps = {steps}
         lr = 1e-2
         grad_accum = 2
         seed = 5
         gate.hidden = 8
         {extra}"
    ))
    .unwrap()
}

fn teacher(steps: usize) -> Checkpoint {
    train_teacher(&teacher_cfg(steps), &mut |_| {}).unwrap().checkpoint
}

fn bits(ck: &Checkpoint) -> Vec<u8> {
    ck.to_bytes().unwrap()
}

#[test]
fn zero_steps_is_the_initialization() {
    let cfg = teacher_cfg(0);
    let out = train_teacher(&cfg, &mut |_| {}).unwrap();
    assert!(out.log.is_empty());
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
    let init = crate::Model::<f32>::init(cfg.model.clone(), &mut rng).unwrap();
    assert_eq!(out.checkpoint.model.weights, init.weights);
}

#[test]
fn teacher_training_is_deterministic_and_learns() {
    let cfg = teacher_cfg(30);
    let a = train_teacher(&cfg, &mut |_| {}).unwrap();
    let b = train_teacher(&cfg, &mut |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(bits(&a.checkpoint), bits(&b.checkpoint));
    let first: f64 = a.log[..5].iter().map(|l| l.ntp).sum();
    let last: f64 = a.log[25..].iter().map(|l| l.ntp).sum();
    assert!(last < first, "{first} → {last}");
    assert!(a.final_accuracy().is_some());
}

#[test]
fn divergence_keeps_last_good_parameters() {
    let mut cfg = teacher_cfg(3);
    cfg.train.max_loss = 1e-6;
    let out = train_teacher(&cfg, &mut |_| {}).unwrap();
    assert_eq!(out.divergence.map(|d| d.0), Some(0));
    assert_eq!(out.checkpoint.meta.step, 0);
    assert_eq!(out.checkpoint.model.weights, teacher(0).model.weights);
}

#[test]
fn gate_training_leaves_the_base_untouched() {
    let t = teacher(5);
    let out = train_gates(&gate_cfg(4, ""), &t, &mut |_| {}).unwrap();
    assert_eq!(out.log.len(), 4);
    let before = t.model.weights.named();
    let after = out.checkpoint.model.weights.named();
    for ((n, a), (_, b)) in before.iter().zip(&after) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{n} drifted");
    }
    let again = train_gates(&gate_cfg(4, ""), &t, &mut |_| {}).unwrap();
    assert_eq!(bits(&out.checkpoint), bits(&again.checkpoint));
    let back = Checkpoint::from_bytes(&bits(&out.checkpoint)).unwrap();
    assert_eq!(back.gates, out.checkpoint.gates);
}

#[test]
fn disabled_capacity_never_touches_updates() {
    let t = teacher(3);
    let run = |extra: &str| train_gates(&gate_cfg(3, extra), &t, &mut |_| {}).unwrap().checkpoint.gates;
    let quality_only = run("use_cap = false");
    assert_eq!(quality_only, run("use_cap = false\nlambda_cap = 7"));
    assert_eq!(quality_only, run("lambda_cap = 0"));
    assert_ne!(quality_only, run("lambda_cap = 1"));
}

#[test]
fn logged_capacity_matches_offline_recomputation() {
    let t = teacher(3);
    let mut checked = 0;
    let mut observer = |ev: &StepEvent| {
        let mut offline = 0.0;
        let mut count = 0;
        for sample in ev.retention {
            for r in sample {
                for g in 0..r.log_betas.cols() {
                    let col: Vec<f64> = (0..r.log_betas.rows()).map(|i| r.log_betas.at(i, g) as f64).collect();
                    offline += capacity_loss(&col, ev.budget).unwrap();
                    count += 1;
                }
            }
        }
        let offline = offline / count as f64;
        assert!((offline - ev.log.cap).abs() < 1e-6, "{offline} vs {}", ev.log.cap);
        checked += 1;
    };
    train_gates(&gate_cfg(3, "budget = 3"), &t, &mut observer).unwrap();
    assert_eq!(checked, 3);
}

#[test]
fn without_capacity_pressure_gates_stay_open() {
    let t = teacher(3);
    let out = train_gates(&gate_cfg(10, "lambda_cap = 0"), &t, &mut |_| {}).unwrap();
    let ck = out.checkpoint;
    let samples = held_out(&ck.meta.task.clone().unwrap(), 0, 8).unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for s in &samples {
        let f = ck.model.forward_student(s.inputs(), ck.gates().unwrap()).unwrap();
        for r in f.retention.unwrap() {
            sum += r.betas.data().iter().map(|&b| b as f64).sum::<f64>();
            n += r.betas.len();
        }
    }
    assert!(sum / n as f64 >= 0.99);
}

#[test]
fn gate_stage_rejects_mismatched_tasks() {
    let t = teacher(0);
    let cfg = RunConfig::parse(
        "stage = gates
         task = recall:n_pairs=2,seq_len=12,vocab=64
         teacher = x",
    )
    .unwrap();
    assert!(matches!(train_gates(&cfg, &t, &mut |_| {}), Err(crate::Error::Config(_))));
}
