use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trimkv::analysis::{deviation_vs_budget, DeviationRow, EvalReport};
use trimkv::cache::{DecodeOptions, Decoder, Policy};
use trimkv::tasks::TaskSpec;
use trimkv::train::{held_out, Checkpoint};

use crate::export;
use crate::failure::{create_dir, to_json, write, Failure};
use crate::manifest::RunManifest;
use crate::EvaluateArgs;

/// Raw per-head log-retentions of the traced sample.
#[derive(Serialize, Deserialize)]
pub struct RetentionDump {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub log_betas: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
pub struct DeviationDump {
    pub rows: Vec<DeviationDumpRow>,
}

#[derive(Serialize, Deserialize)]
pub struct DeviationDumpRow {
    pub policy: String,
    pub budget: usize,
    pub deviation: f64,
    pub se: f64,
    pub accuracy: f64,
}

impl From<&DeviationDumpRow> for DeviationRow {
    fn from(r: &DeviationDumpRow) -> Self {
        DeviationRow {
            policy: r.policy.clone(),
            budget: r.budget,
            deviation: r.deviation,
            accuracy: Some(r.accuracy),
        }
    }
}

fn parse_budgets(spec: &str, seq_len: usize) -> Result<Vec<Option<usize>>, Failure> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            if s == "full" {
                return Ok(None);
            }
            let m = if let Some(p) = s.strip_suffix('%') {
                let pct: f64 = p.parse().map_err(|_| Failure::config(format!("bad budget {s:?}")))?;
                (pct / 100.0 * seq_len as f64).round() as usize
            } else {
                s.parse().map_err(|_| Failure::config(format!("bad budget {s:?}")))?
            };
            if m == 0 {
                return Err(Failure::config(format!("budget {s:?} resolves to 0; M must be at least 1")));
            }
            Ok(Some(m))
        })
        .collect()
}

pub fn parse_policies(spec: &str) -> Result<Vec<Policy>, Failure> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Policy::parse(s).map_err(Failure::from))
        .collect()
}

pub fn run(args: &EvaluateArgs, argv: &[String]) -> Result<(), Failure> {
    let policies = parse_policies(&args.policy)?;
    if policies.is_empty() {
        return Err(Failure::config("no policy given"));
    }
    let ck = Checkpoint::load(&args.ckpt)?;
    let task = match (&args.task, &ck.meta.task) {
        (Some(s), _) => TaskSpec::parse(s)?,
        (None, Some(t)) => t.clone(),
        (None, None) => return Err(Failure::config("checkpoint records no task; pass --task")),
    };
    let budgets = parse_budgets(&args.budget, task.seq_len())?;
    if budgets.is_empty() {
        return Err(Failure::config("no budget given"));
    }
    if args.trace && args.out.is_none() {
        return Err(Failure::config("--trace needs --out DIR"));
    }
    let gates = ck.gates.as_deref();
    if gates.is_none() && policies.iter().any(Policy::needs_gates) {
        return Err(Failure::config("checkpoint has no retention gates; trimkv needs a train-gates checkpoint"));
    }
    let samples = held_out(&task, args.seed, args.samples)?;
    let manifest = args
        .out
        .as_ref()
        .map(|out| RunManifest::start("evaluate", argv, None, Some(args.seed), out));

    let reports = deviation_vs_budget(&ck.model, gates, &samples, &policies, &budgets, args.chunk)?;
    let mut rows: Vec<&EvalReport> = Vec::new();
    for r in &reports {
        // the full-cache row is identical for every policy
        if r.budget.is_none() && rows.iter().any(|x| x.budget.is_none()) {
            continue;
        }
        rows.push(r);
    }
    println!("policy,M,accuracy,deviation,deviation_se");
    for r in &rows {
        let m = r.budget.map_or("full".to_string(), |m| m.to_string());
        println!("{},{m},{:.4},{:.6},{:.6}", r.policy, r.accuracy, r.mean_deviation, r.se_deviation);
    }

    let Some(out) = &args.out else {
        return Ok(());
    };
    create_dir(out)?;
    let dump = DeviationDump {
        rows: rows
            .iter()
            .map(|r| DeviationDumpRow {
                policy: r.policy.clone(),
                budget: r.budget.unwrap_or(task.seq_len()),
                deviation: r.mean_deviation,
                se: r.se_deviation,
                accuracy: r.accuracy,
            })
            .collect(),
    };
    write(&out.join("deviation.json"), to_json(&dump))?;
    export::deviation(out, out)?;

    if args.trace {
        let policy = policies[0];
        let budget = budgets.iter().copied().find(Option::is_some).flatten();
        let options = DecodeOptions {
            trace: true,
            retention: gates.is_some(),
            attention: false,
        };
        let sample = &samples[0];
        let mut dec = Decoder::new(&ck.model, gates, budget, policy, options)?;
        dec.chunked_prefill(sample.inputs(), args.chunk)?;
        if let Some(log) = dec.retention_log() {
            let dump = RetentionDump {
                n_layers: ck.model.config.n_layers,
                n_kv_heads: ck.model.config.n_kv_heads,
                log_betas: log.iter().map(|h| h.iter().map(|&x| x as f64).collect()).collect(),
            };
            write(&out.join("retention.json"), to_json(&dump))?;
            export::retention(out, out)?;
        }
        let trace = dec.into_trace().expect("tracing enabled");
        write(&out.join("trace.bin"), trace.to_bytes())?;
        export::trace(out, out)?;
    }
    if let Some(m) = manifest {
        m.finish(out)?;
    }
    Ok(())
}

pub fn open_csv(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::io(path, e))
}
