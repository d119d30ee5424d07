use serde::Serialize;
use trimkv::cache::{measure_throughput, Policy, ThroughputConfig, ThroughputReport};
use trimkv::train::Checkpoint;

use crate::failure::{create_dir, to_json, write, Failure};
use crate::manifest::RunManifest;
use crate::BenchArgs;

#[derive(Serialize)]
struct BenchResult {
    context: usize,
    gen: usize,
    full: ThroughputReport,
    bounded: ThroughputReport,
}

fn line(name: &str, r: &ThroughputReport) {
    println!(
        "{name:<8} budget={:<6} tokens/sec={:>10.1}  decode_seconds={:.4}  steps/seq={}",
        r.budget.map_or("full".into(), |m| m.to_string()),
        r.tokens_per_sec,
        r.decode_seconds,
        r.steps_per_sequence.first().copied().unwrap_or(0)
    );
}

pub fn run(args: &BenchArgs, argv: &[String]) -> Result<(), Failure> {
    let policy = Policy::parse(&args.policy)?;
    let ck = Checkpoint::load(&args.ckpt)?;
    let gates = ck.gates.as_deref();
    if gates.is_none() && policy.needs_gates() {
        return Err(Failure::config("checkpoint has no retention gates; use a baseline --policy or a train-gates checkpoint"));
    }
    if args.reps < 3 {
        return Err(Failure::config("bench needs at least 3 repetitions"));
    }
    let manifest = args.out.as_ref().map(|out| RunManifest::start("bench", argv, None, None, out));
    let mut cfg = ThroughputConfig {
        context: args.context,
        gen: args.gen,
        budget: None,
        batch: args.batch,
        reps: args.reps,
        warmup: args.warmup,
        policy,
        prefill_chunk: args.chunk,
        seed: 0,
    };
    let full = measure_throughput(&ck.model, gates, &cfg)?;
    cfg.budget = Some(args.budget);
    let bounded = measure_throughput(&ck.model, gates, &cfg)?;
    line("full", &full);
    line("bounded", &bounded);
    if let (Some(out), Some(m)) = (&args.out, manifest) {
        create_dir(out)?;
        let result = BenchResult {
            context: args.context,
            gen: args.gen,
            full,
            bounded,
        };
        write(&out.join("bench.json"), to_json(&result))?;
        m.finish(out)?;
    }
    Ok(())
}
