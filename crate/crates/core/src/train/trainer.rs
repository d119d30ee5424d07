use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::evaluate;
use crate::cache::Policy;
use crate::error::{Error, Result};
use crate::gates::{GateParams, RetentionScores};
use crate::losses::{capacity_loss_grad, kl_distill_grad, ntp_loss_grad, total_objective, CAPACITY_TILE};
use crate::model::{BackwardRequest, Model, ModelWeights};
use crate::numkern::Tensor;
use crate::tasks::{sample_seed, TaskSample, TaskSpec};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{DistillPositions, RunConfig, Stage, TrainConfig};
use super::optim::{adam_step, AdamConfig, AdamState, Param};

/// Salt separating the held-out stream from training samples.
const HELD_OUT_SALT: u64 = 0x5EED_0F_4E1D_0u64;
const GATE_INIT_SALT: u64 = 0x6A7E;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub kl: f64,
    pub ntp: f64,
    pub cap: f64,
    pub total: f64,
}

impl StepLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
}

/// Passed to the observer after every optimizer step.
pub struct StepEvent<'a> {
    pub log: &'a StepLog,
    /// Student retention scores of each sample in the step (gate stage only).
    pub retention: &'a [Vec<RetentionScores<f32>>],
    pub budget: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    /// `(step, loss)` when training stopped on a diverging loss; the
    /// checkpoint then holds the last parameters that produced a finite step.
    pub divergence: Option<(usize, f64)>,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.evals.last().map(|e| e.accuracy)
    }
}

pub fn held_out(task: &TaskSpec, seed: u64, count: usize) -> Result<Vec<TaskSample>> {
    task.scoring().samples(seed ^ HELD_OUT_SALT, count)
}

fn training_sample(task: &TaskSpec, seed: u64, index: usize) -> Result<TaskSample> {
    task.sample(sample_seed(seed, index as u64))
}

fn select_rows(m: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[rows.len(), m.cols()]);
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

fn scatter_rows(dst: &mut Tensor<f32>, src: &Tensor<f32>, rows: &[usize]) {
    for (i, &r) in rows.iter().enumerate() {
        for (d, &s) in dst.row_mut(r).iter_mut().zip(src.row(i)) {
            *d += s;
        }
    }
}

fn split_targets(s: &TaskSample) -> Result<(Vec<usize>, Vec<usize>)> {
    let targets = s.targets();
    if targets.is_empty() {
        return Err(Error::Domain("training sample has no prediction targets".into()));
    }
    Ok(targets.into_iter().unzip())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose whole answer span is predicted exactly by a
/// full-sequence forward (teacher attention, or soft retention gating).
pub fn forward_accuracy(model: &Model<f32>, gates: Option<&[GateParams<f32>]>, samples: &[TaskSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("accuracy over an empty sample set".into()));
    }
    let hits = samples
        .par_iter()
        .map(|s| -> Result<bool> {
            let out = model.forward_taped(s.inputs(), gates)?.0;
            let (a, b) = s.answer_span;
            Ok((a..b).all(|i| argmax(out.logits.row(i - 1)) == s.tokens[i]))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

fn check_task_fits(model: &Model<f32>, task: &TaskSpec) -> Result<()> {
    if model.config.vocab_size < task.vocab() || model.config.max_seq < task.seq_len() {
        return Err(Error::Config(format!(
            "task {} does not fit a model with vocabulary {} and max_seq {}",
            task.to_spec_string(),
            model.config.vocab_size,
            model.config.max_seq
        )));
    }
    Ok(())
}

fn diverged(loss: f64, tc: &TrainConfig) -> bool {
    !loss.is_finite() || loss > tc.max_loss
}

fn teacher_sample(model: &Model<f32>, s: &TaskSample) -> Result<(f64, ModelWeights<f32>)> {
    let (rows, tokens) = split_targets(s)?;
    let (out, tape) = model.forward_taped(s.inputs(), None)?;
    let (loss, g) = ntp_loss_grad(&select_rows(&out.logits, &rows), &tokens)?;
    let mut grad_logits = Tensor::zeros(out.logits.shape());
    scatter_rows(&mut grad_logits, &g, &rows);
    let req = BackwardRequest {
        weights: true,
        gates: false,
    };
    let grads = model.backward(&tape, None, &grad_logits, None, req)?;
    Ok((loss as f64, grads.weights.expect("weight gradients requested")))
}

/// Stage one: next-token training of the full-attention teacher on loss-masked targets.
pub fn train_teacher(cfg: &RunConfig, observer: &mut dyn FnMut(&StepEvent)) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    if tc.stage != Stage::Teacher {
        return Err(Error::Config("train_teacher needs stage = teacher".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = Model::<f32>::init(cfg.model.clone(), &mut rng)?;
    check_task_fits(&model, &cfg.task)?;
    let eval_set = held_out(&cfg.task, tc.seed, tc.eval_samples)?;
    let shapes: Vec<Vec<usize>> = model.weights.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut state = AdamState::new(&shapes.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let hp = AdamConfig::new(tc.lr, tc.weight_decay);
    let per_step = tc.batch_size * tc.grad_accum;

    let mut log = Vec::with_capacity(tc.steps);
    let mut evals = Vec::new();
    let mut divergence = None;
    let mut steps_done = 0;
    for step in 0..tc.steps {
        let mut acc = model.weights.zeros_like();
        let mut loss_sum = 0.0;
        for micro in 0..tc.grad_accum {
            let base = step * per_step + micro * tc.batch_size;
            let samples = (base..base + tc.batch_size)
                .map(|i| training_sample(&cfg.task, tc.seed, i))
                .collect::<Result<Vec<_>>>()?;
            let results = samples
                .par_iter()
                .map(|s| teacher_sample(&model, s))
                .collect::<Result<Vec<_>>>()?;
            for (loss, g) in results {
                loss_sum += loss;
                for ((_, a), (_, b)) in acc.named_mut().into_iter().zip(g.named()) {
                    a.add_assign(b)?;
                }
            }
        }
        let ntp = loss_sum / per_step as f64;
        let entry = StepLog {
            step,
            kl: 0.0,
            ntp,
            cap: 0.0,
            total: ntp,
        };
        if diverged(ntp, tc) {
            divergence = Some((step, ntp));
            break;
        }
        let inv = 1.0 / per_step as f32;
        let mut params: Vec<Param<f32>> = Vec::new();
        let grads: Vec<(String, Tensor<f32>)> = acc
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.map(|x| x * inv)))
            .collect();
        for ((name, value), (_, grad)) in model.weights.named_mut().into_iter().zip(&grads) {
            params.push(Param {
                decay: ModelWeights::<f32>::decays(&name),
                name,
                value,
                grad,
            });
        }
        adam_step(&mut params, &mut state, &hp)?;
        steps_done = step + 1;
        log.push(entry);
        observer(&StepEvent {
            log: &entry,
            retention: &[],
            budget: 0,
        });
        if tc.eval_every > 0 && steps_done % tc.eval_every == 0 && steps_done < tc.steps {
            let accuracy = forward_accuracy(&model, None, &eval_set)?;
            evals.push(EvalPoint {
                step: steps_done,
                accuracy,
            });
            if tc.target_accuracy.is_some_and(|t| accuracy >= t) {
                break;
            }
        }
    }
    if evals.last().map(|e| e.step) != Some(steps_done) && !eval_set.is_empty() {
        evals.push(EvalPoint {
            step: steps_done,
            accuracy: forward_accuracy(&model, None, &eval_set)?,
        });
    }
    let meta = CheckpointMeta {
        stage: Stage::Teacher,
        step: steps_done,
        model: model.config.clone(),
        train: Some(tc.clone()),
        task: Some(cfg.task.clone()),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta,
            model,
            gates: None,
        },
        log,
        evals,
        divergence,
    })
}

struct GateSample {
    kl: f64,
    ntp: f64,
    cap: f64,
    grads: Vec<GateParams<f32>>,
    retention: Vec<RetentionScores<f32>>,
}

/// Gate-stage loss and gate gradients for one sample. Capacity is averaged
/// over every (layer, KV head) pair.
fn gate_sample(
    model: &Model<f32>,
    gates: &[GateParams<f32>],
    s: &TaskSample,
    tc: &TrainConfig,
    budget: usize,
) -> Result<GateSample> {
    let (trows, ttoks) = split_targets(s)?;
    let inputs = s.inputs();
    let n = inputs.len();
    let teacher = model.forward_teacher(inputs)?.logits;
    let (out, tape) = model.forward_taped(inputs, Some(gates))?;
    let retention = out.retention.clone().expect("student forward yields retention scores");
    let mut grad_logits = Tensor::zeros(out.logits.shape());

    let krows: Vec<usize> = match tc.distill_positions {
        DistillPositions::All => (0..n).collect(),
        DistillPositions::Targets => trows.clone(),
    };
    let (kl, gkl) = kl_distill_grad(
        &select_rows(&teacher, &krows),
        &select_rows(&out.logits, &krows),
        tc.kl_direction,
    )?;
    if tc.use_kl {
        scatter_rows(&mut grad_logits, &gkl, &krows);
    }
    let (ntp, gntp) = ntp_loss_grad(&select_rows(&out.logits, &trows), &ttoks)?;
    if tc.use_ntp {
        scatter_rows(&mut grad_logits, &gntp, &trows);
    }

    let n_kv = model.config.n_kv_heads;
    let count = (retention.len() * n_kv) as f64;
    let weight = (tc.lambda_cap / count) as f32;
    let mut cap = 0.0;
    let mut extra = Vec::with_capacity(retention.len());
    for r in &retention {
        let mut e = Tensor::zeros(&[n, n_kv]);
        for g in 0..n_kv {
            let col: Vec<f32> = (0..n).map(|t| r.log_betas.at(t, g)).collect();
            let (c, grad) = capacity_loss_grad(&col, budget, CAPACITY_TILE)?;
            cap += c as f64 / count;
            for (t, &d) in grad.iter().enumerate() {
                e.set(t, g, d * weight);
            }
        }
        extra.push(e);
    }
    let req = BackwardRequest {
        weights: false,
        gates: true,
    };
    let grads = model.backward(&tape, Some(gates), &grad_logits, tc.use_cap.then_some(&extra[..]), req)?;
    Ok(GateSample {
        kl: kl as f64,
        ntp: ntp as f64,
        cap,
        grads: grads.gates.expect("gate gradients requested"),
        retention,
    })
}

/// Stage two: freeze the teacher, attach gates, and train them alone on
/// distillation, next-token and capacity terms.
pub fn train_gates(cfg: &RunConfig, teacher: &Checkpoint, observer: &mut dyn FnMut(&StepEvent)) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    if tc.stage != Stage::Gates {
        return Err(Error::Config("train_gates needs stage = gates".into()));
    }
    tc.validate()?;
    let mut model_cfg = teacher.model.config.clone();
    model_cfg.gate = cfg.model.gate.clone();
    model_cfg.validate()?;
    let model = Model::new(model_cfg, teacher.model.weights.clone())?;
    check_task_fits(&model, &cfg.task)?;
    let budget = tc.budget.resolve(cfg.task.seq_len());
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(tc.seed, GATE_INIT_SALT));
    let mut gates = model.init_gates(&mut rng)?;
    let shapes: Vec<Vec<usize>> = gates
        .iter()
        .flat_map(|g| g.tensors().into_iter().map(|(_, t)| t.shape().to_vec()))
        .collect();
    let mut state = AdamState::new(&shapes.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let hp = AdamConfig::new(tc.lr, tc.weight_decay);
    let per_step = tc.batch_size * tc.grad_accum;
    let eval_set = held_out(&cfg.task, tc.seed, tc.eval_samples)?;
    // accuracy of trimkv eviction at the training budget
    let bounded_accuracy = |gates: &[GateParams<f32>]| -> Result<f64> {
        Ok(evaluate(&model, Some(gates), &eval_set, Policy::TrimKv, Some(budget), 1)?.accuracy)
    };

    let mut log = Vec::with_capacity(tc.steps);
    let mut evals = Vec::new();
    let mut divergence = None;
    let mut steps_done = 0;
    for step in 0..tc.steps {
        let mut acc: Vec<GateParams<f32>> = gates.iter().map(GateParams::zeros_like).collect();
        let (mut kl, mut ntp, mut cap) = (0.0, 0.0, 0.0);
        let mut retention = Vec::with_capacity(per_step);
        for micro in 0..tc.grad_accum {
            let base = step * per_step + micro * tc.batch_size;
            let samples = (base..base + tc.batch_size)
                .map(|i| training_sample(&cfg.task, tc.seed, i))
                .collect::<Result<Vec<_>>>()?;
            let results = samples
                .par_iter()
                .map(|s| gate_sample(&model, &gates, s, tc, budget))
                .collect::<Result<Vec<_>>>()?;
            for r in results {
                kl += r.kl;
                ntp += r.ntp;
                cap += r.cap;
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    for (dst, (_, src)) in a.tensors_mut().into_iter().zip(g.tensors()) {
                        dst.add_assign(src)?;
                    }
                }
                retention.push(r.retention);
            }
        }
        let k = per_step as f64;
        let (kl, ntp, cap) = (kl / k, ntp / k, cap / k);
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        let report = total_objective(
            on(tc.use_kl) * kl,
            on(tc.use_ntp) * ntp,
            cap,
            on(tc.use_cap) * tc.lambda_cap,
        );
        let total = match report {
            Ok(r) => r.total,
            Err(_) => f64::NAN,
        };
        if diverged(total, tc) {
            divergence = Some((step, total));
            break;
        }
        let entry = StepLog {
            step,
            kl,
            ntp,
            cap,
            total,
        };
        let inv = 1.0 / per_step as f32;
        for a in acc.iter_mut() {
            for t in a.tensors_mut() {
                t.scale_in_place(inv);
            }
        }
        let mut params: Vec<Param<f32>> = Vec::new();
        for (l, (g, a)) in gates.iter_mut().zip(&acc).enumerate() {
            let names: Vec<&'static str> = g.tensors().into_iter().map(|(p, _)| p).collect();
            for ((part, value), (_, grad)) in names.into_iter().zip(g.tensors_mut()).zip(a.tensors()) {
                params.push(Param {
                    name: format!("gates.{l}.{part}"),
                    value,
                    grad,
                    decay: part != "bias",
                });
            }
        }
        adam_step(&mut params, &mut state, &hp)?;
        steps_done = step + 1;
        log.push(entry);
        observer(&StepEvent {
            log: &entry,
            retention: &retention,
            budget,
        });
        if tc.eval_every > 0 && steps_done % tc.eval_every == 0 && steps_done < tc.steps && !eval_set.is_empty() {
            evals.push(EvalPoint {
                step: steps_done,
                accuracy: bounded_accuracy(&gates)?,
            });
        }
    }
    if !eval_set.is_empty() {
        evals.push(EvalPoint {
            step: steps_done,
            accuracy: bounded_accuracy(&gates)?,
        });
    }
    let meta = CheckpointMeta {
        stage: Stage::Gates,
        step: steps_done,
        model: model.config.clone(),
        train: Some(tc.clone()),
        task: Some(cfg.task.clone()),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta,
            model,
            gates: Some(gates),
        },
        log,
        evals,
        divergence,
    })
}
