use rayon::prelude::*;

use crate::cache::{oracle_optimal_eviction, simulate_policy, DecodeOptions, Decoder, HeadInstance, Policy, StepOutput};
use crate::error::{Error, Result};
use crate::gates::GateParams;
use crate::model::Model;
use crate::tasks::{sample_seed, TaskSample};

/// One sample decoded under one policy and budget.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub correct: bool,
    pub steps: Vec<StepOutput<f32>>,
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

/// Feeds the sample's inputs through a bounded-cache decoder in chunks and
/// scores the answer span by greedy prediction.
pub fn run_sample(
    model: &Model<f32>,
    gates: Option<&[GateParams<f32>]>,
    sample: &TaskSample,
    budget: Option<usize>,
    policy: Policy,
    chunk: usize,
    options: DecodeOptions,
) -> Result<SampleRun> {
    let mut dec = Decoder::new(model, gates, budget, policy, options)?;
    let steps = dec.chunked_prefill(sample.inputs(), chunk)?;
    let (a, b) = sample.answer_span;
    let correct = (a..b).all(|i| argmax(&steps[i - 1].logits) == sample.tokens[i]);
    Ok(SampleRun { correct, steps })
}

fn deviation(run: &SampleRun, full: &SampleRun) -> f64 {
    let mut total = 0.0;
    for (s, f) in run.steps.iter().zip(&full.steps) {
        let (Some(a), Some(b)) = (&s.attention, &f.attention) else {
            continue;
        };
        for (la, lb) in a.iter().zip(b) {
            total += la.iter().zip(lb).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy: String,
    /// `None` for the full cache.
    pub budget: Option<usize>,
    pub n: usize,
    pub accuracy: f64,
    /// Mean over samples of `Σ_t Σ_layers ‖o'_t − o_t‖²` against the full cache.
    pub mean_deviation: f64,
    pub se_deviation: f64,
}

fn with_sample_seed(policy: Policy, index: usize) -> Policy {
    match policy {
        Policy::Random { seed } => Policy::Random {
            seed: sample_seed(seed, index as u64),
        },
        p => p,
    }
}

fn full_runs(model: &Model<f32>, gates: Option<&[GateParams<f32>]>, samples: &[TaskSample], chunk: usize) -> Result<Vec<SampleRun>> {
    let opts = DecodeOptions {
        attention: true,
        ..DecodeOptions::default()
    };
    samples
        .par_iter()
        .map(|s| run_sample(model, gates, s, None, Policy::RecencyWindow, chunk, opts))
        .collect()
}

fn report(policy: String, budget: Option<usize>, runs: &[SampleRun], full: &[SampleRun]) -> EvalReport {
    let n = runs.len();
    let devs: Vec<f64> = runs.iter().zip(full).map(|(r, f)| deviation(r, f)).collect();
    let mean = devs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    EvalReport {
        policy,
        budget,
        n,
        accuracy: runs.iter().filter(|r| r.correct).count() as f64 / n as f64,
        mean_deviation: mean,
        se_deviation: (var / n as f64).sqrt(),
    }
}

fn policy_runs(
    model: &Model<f32>,
    gates: Option<&[GateParams<f32>]>,
    samples: &[TaskSample],
    policy: Policy,
    budget: usize,
    chunk: usize,
) -> Result<Vec<SampleRun>> {
    let opts = DecodeOptions {
        attention: true,
        ..DecodeOptions::default()
    };
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| run_sample(model, gates, s, Some(budget), with_sample_seed(policy, i), chunk, opts))
        .collect()
}

/// Accuracy and deviation of one policy at one budget (`None` = full cache).
pub fn evaluate(
    model: &Model<f32>,
    gates: Option<&[GateParams<f32>]>,
    samples: &[TaskSample],
    policy: Policy,
    budget: Option<usize>,
    chunk: usize,
) -> Result<EvalReport> {
    Ok(deviation_vs_budget(model, gates, samples, &[policy], &[budget], chunk)?.remove(0))
}

/// Every (policy, budget) pair, in policy-major order, against one shared
/// full-cache reference.
pub fn deviation_vs_budget(
    model: &Model<f32>,
    gates: Option<&[GateParams<f32>]>,
    samples: &[TaskSample],
    policies: &[Policy],
    budgets: &[Option<usize>],
    chunk: usize,
) -> Result<Vec<EvalReport>> {
    if samples.is_empty() {
        return Err(Error::Domain("evaluation needs at least one sample".into()));
    }
    let full = full_runs(model, gates, samples, chunk)?;
    let mut out = Vec::new();
    for &policy in policies {
        for &budget in budgets {
            let runs = match budget {
                None => full.clone(),
                Some(m) => policy_runs(model, gates, samples, policy, m, chunk)?,
            };
            let name = if budget.is_none() { "full".to_string() } else { policy.name() };
            out.push(report(name, budget, &runs, &full));
        }
    }
    Ok(out)
}

/// One row of a deviation table.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationRow {
    pub policy: String,
    pub budget: usize,
    pub deviation: f64,
    pub accuracy: Option<f64>,
}

impl From<&EvalReport> for DeviationRow {
    fn from(r: &EvalReport) -> Self {
        DeviationRow {
            policy: r.policy.clone(),
            budget: r.budget.unwrap_or(0),
            deviation: r.mean_deviation,
            accuracy: Some(r.accuracy),
        }
    }
}

/// Single-head deviation for each (policy, M), plus an `oracle` row per
/// budget wherever exhaustive search is allowed.
pub fn head_deviation_table(inst: &HeadInstance, policies: &[Policy], budgets: &[usize]) -> Result<Vec<DeviationRow>> {
    let mut rows = Vec::new();
    for &m in budgets {
        for &p in policies {
            rows.push(DeviationRow {
                policy: p.name(),
                budget: m,
                deviation: simulate_policy(inst, m, p)?.deviation,
                accuracy: None,
            });
        }
        match oracle_optimal_eviction(inst, m) {
            Ok(o) => rows.push(DeviationRow {
                policy: "oracle".into(),
                budget: m,
                deviation: o.deviation,
                accuracy: None,
            }),
            Err(Error::SizeGuard(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

/// Mean `β` over every token, layer and KV head of the student forward.
pub fn mean_retention(model: &Model<f32>, gates: &[GateParams<f32>], samples: &[TaskSample]) -> Result<f64> {
    let sums = samples
        .par_iter()
        .map(|s| -> Result<(f64, usize)> {
            let out = model.forward_student(s.inputs(), gates)?;
            let mut acc = (0.0, 0);
            for r in out.retention.expect("student forward") {
                acc.0 += r.betas.data().iter().map(|&b| b as f64).sum::<f64>();
                acc.1 += r.betas.len();
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let (s, n) = sums.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(s / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::random_instances;
    use crate::model::ModelConfig;
    use crate::tasks::TaskSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Model<f32>, Vec<GateParams<f32>>, Vec<TaskSample>) {
        let mut cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            n_kv_heads: 1,
            d_model: 8,
            d_head: 4,
            d_ff: 16,
            vocab_size: 16,
            max_seq: 32,
            ..ModelConfig::default()
        };
        cfg.gate.hidden = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::init(cfg, &mut rng).unwrap();
        let gates = model.init_gates(&mut rng).unwrap();
        let samples = TaskSpec::parse("recall:n_pairs=2,seq_len=16,vocab=16").unwrap().samples(3, 6).unwrap();
        (model, gates, samples)
    }

    #[test]
    fn large_budget_equals_full_cache() {
        let (model, gates, samples) = setup();
        let rows = deviation_vs_budget(
            &model,
            Some(&gates),
            &samples,
            &[Policy::TrimKv, Policy::Random { seed: 1 }],
            &[None, Some(15), Some(4)],
            1,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            if r.budget != Some(4) {
                assert_eq!(r.mean_deviation, 0.0);
                assert_eq!(r.accuracy, rows[0].accuracy);
            }
        }
        let a = evaluate(&model, Some(&gates), &samples, Policy::Random { seed: 5 }, Some(3), 1).unwrap();
        let b = evaluate(&model, Some(&gates), &samples, Policy::Random { seed: 5 }, Some(3), 1).unwrap();
        assert_eq!(a, b);
        assert!(a.mean_deviation > 0.0);
        let csv_rows: Vec<DeviationRow> = rows.iter().map(DeviationRow::from).collect();
        let mut buf = Vec::new();
        super::super::write_deviation_csv(&csv_rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

    #[test]
    fn head_table_oracle_row_is_minimal() {
        let inst = random_instances(1, 8, 4, 11).remove(0);
        let policies = [Policy::TrimKv, Policy::RecencyWindow, Policy::H2o { recent: None }];
        let rows = head_deviation_table(&inst, &policies, &[2, 3, 7, 8]).unwrap();
        assert!(rows.iter().all(|r| r.policy != "oracle" || r.budget <= 4));
        for m in [2, 3] {
            let at: Vec<&DeviationRow> = rows.iter().filter(|r| r.budget == m).collect();
            let oracle = at.iter().find(|r| r.policy == "oracle").unwrap().deviation;
            assert!(at.iter().all(|r| oracle <= r.deviation + 1e-12));
        }
        for r in rows.iter().filter(|r| r.budget == 8) {
            assert_eq!(r.deviation, 0.0);
        }
        for p in &policies {
            let d = |m| rows.iter().find(|r| r.budget == m && r.policy == p.name()).unwrap().deviation;
            assert!(d(8) <= d(7));
        }
    }

    #[test]
    fn open_gates_have_mean_retention_near_one() {
        let (model, gates, samples) = setup();
        assert!(mean_retention(&model, &gates, &samples).unwrap() > 0.999);
    }
}
