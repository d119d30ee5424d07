use std::io::Write;

use serde::Serialize;
use trimkv::analysis::mean_retention;
use trimkv::train::{held_out, train_gates, train_teacher, Checkpoint, EvalPoint, RunConfig, Stage, StepEvent};

use crate::failure::{create_dir, to_json, write, Failure, EXIT_DIVERGED};
use crate::manifest::RunManifest;
use crate::TrainArgs;

#[derive(Serialize)]
struct Summary {
    stage: Stage,
    steps: usize,
    evals: Vec<EvalPoint>,
    final_accuracy: Option<f64>,
    mean_retention: Option<f64>,
    diverged_at: Option<usize>,
    seconds: f64,
}

pub fn run(stage: Stage, args: &TrainArgs, argv: &[String]) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Failure::io(&args.config, e))?;
    let mut cfg = RunConfig::parse_unvalidated(&text)?;
    if cfg.train.stage != stage {
        return Err(Failure::config(format!(
            "config {} has stage {:?}; this command trains {stage:?}",
            args.config.display(),
            cfg.train.stage
        )));
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(t) = &args.teacher {
        cfg.teacher = Some(t.clone());
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    create_dir(&args.out)?;
    let command = match stage {
        Stage::Teacher => "train-teacher",
        Stage::Gates => "train-gates",
    };
    let manifest = RunManifest::start(command, argv, Some(&args.config), Some(cfg.train.seed), &args.out);

    let total = cfg.train.steps.max(1);
    let every = (total / 20).max(1);
    let mut observer = |ev: &StepEvent| {
        let l = ev.log;
        if (l.step + 1) % every == 0 || l.step + 1 == total {
            eprintln!(
                "step {:>6}/{total}  kl {:.4}  ntp {:.4}  cap {:.4}  total {:.4}",
                l.step + 1,
                l.kl,
                l.ntp,
                l.cap,
                l.total
            );
        }
    };
    let start = std::time::Instant::now();
    let outcome = match stage {
        Stage::Teacher => train_teacher(&cfg, &mut observer)?,
        Stage::Gates => {
            let path = cfg.teacher.clone().expect("validated gate config names a teacher");
            let teacher = Checkpoint::load(&path)?;
            train_gates(&cfg, &teacher, &mut observer)?
        }
    };
    let seconds = start.elapsed().as_secs_f64();

    outcome.checkpoint.save(&args.out.join("model.ckpt"))?;
    let mut log = Vec::new();
    for l in &outcome.log {
        writeln!(log, "{}", l.to_json_line()).expect("writing to memory");
    }
    write(&args.out.join("train_log.jsonl"), log)?;
    let mean_retention = match &outcome.checkpoint.gates {
        Some(g) => {
            let samples = held_out(&cfg.task, cfg.train.seed, cfg.train.eval_samples.clamp(1, 64))?;
            Some(mean_retention(&outcome.checkpoint.model, g, &samples)?)
        }
        None => None,
    };
    let summary = Summary {
        stage,
        steps: outcome.checkpoint.meta.step,
        evals: outcome.evals.clone(),
        final_accuracy: outcome.final_accuracy(),
        mean_retention,
        diverged_at: outcome.divergence.map(|d| d.0),
        seconds,
    };
    write(&args.out.join("summary.json"), to_json(&summary))?;
    manifest.finish(&args.out)?;

    if let Some(acc) = summary.final_accuracy {
        println!("held-out accuracy {acc:.4}");
    }
    if let Some(b) = mean_retention {
        println!("mean retention {b:.4}");
    }
    println!("wrote {}", args.out.join("model.ckpt").display());
    if let Some((step, loss)) = outcome.divergence {
        return Err(Failure {
            code: EXIT_DIVERGED,
            message: format!("training diverged at step {step} (loss {loss}); kept the last good checkpoint"),
        });
    }
    Ok(())
}
