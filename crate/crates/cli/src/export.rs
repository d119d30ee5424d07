use std::io::Write;
use std::path::Path;

use trimkv::analysis::{build_retention_map, write_deviation_csv, DeviationRow, SparsityReport};
use trimkv::cache::EvictionTrace;

use crate::evaluate::{open_csv, DeviationDump, RetentionDump};
use crate::failure::{create_dir, Failure};
use crate::{ExportArgs, ExportWhat};

fn read_artifact(run: &Path, name: &str) -> Result<Vec<u8>, Failure> {
    let path = run.join(name);
    if !path.exists() {
        let hint = match name {
            "deviation.json" => "run `trimkv evaluate --out DIR` first",
            _ => "rerun `trimkv evaluate` with --trace",
        };
        return Err(Failure::config(format!("{} not found; {hint}", path.display())));
    }
    std::fs::read(&path).map_err(|e| Failure::io(&path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], name: &str) -> Result<T, Failure> {
    serde_json::from_slice(bytes).map_err(|e| Failure {
        code: crate::failure::EXIT_IO,
        message: format!("{name}: {e}"),
    })
}

fn finish(mut w: impl Write, path: &Path) -> Result<(), Failure> {
    w.flush().map_err(|e| Failure::io(path, e))
}

pub fn retention(run: &Path, out: &Path) -> Result<(), Failure> {
    let dump: RetentionDump = parse_json(&read_artifact(run, "retention.json")?, "retention.json")?;
    for (ix, lb) in dump.log_betas.iter().enumerate() {
        let (l, h) = (ix / dump.n_kv_heads, ix % dump.n_kv_heads);
        let map = build_retention_map(lb, l, h)?;
        let path = out.join(format!("retention_l{l}_h{h}.csv"));
        let mut w = open_csv(&path)?;
        map.write_csv(&mut w)?;
        finish(w, &path)?;
    }
    Ok(())
}

pub fn sparsity(run: &Path, out: &Path) -> Result<(), Failure> {
    let dump: RetentionDump = parse_json(&read_artifact(run, "retention.json")?, "retention.json")?;
    let report = SparsityReport::from_heads(&dump.log_betas, dump.n_kv_heads)?;
    let path = out.join("sparsity.csv");
    let mut w = open_csv(&path)?;
    report.write_csv(&mut w)?;
    finish(w, &path)
}

pub fn trace(run: &Path, out: &Path) -> Result<(), Failure> {
    let trace = EvictionTrace::from_bytes(&read_artifact(run, "trace.bin")?)?;
    for l in 0..trace.n_layers() {
        for h in 0..trace.n_kv_heads() {
            let path = out.join(format!("trace_l{l}_h{h}.csv"));
            let mut w = open_csv(&path)?;
            trace.write_csv(l, h, &mut w)?;
            finish(w, &path)?;
        }
    }
    Ok(())
}

pub fn deviation(run: &Path, out: &Path) -> Result<(), Failure> {
    let dump: DeviationDump = parse_json(&read_artifact(run, "deviation.json")?, "deviation.json")?;
    let rows: Vec<DeviationRow> = dump.rows.iter().map(DeviationRow::from).collect();
    let path = out.join("deviation.csv");
    let mut w = open_csv(&path)?;
    write_deviation_csv(&rows, &mut w)?;
    finish(w, &path)
}

pub fn run(args: &ExportArgs, _argv: &[String]) -> Result<(), Failure> {
    if !args.run.is_dir() {
        return Err(Failure::config(format!("run directory {} does not exist", args.run.display())));
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.join("export"));
    create_dir(&out)?;
    match args.what {
        ExportWhat::Retention => retention(&args.run, &out),
        ExportWhat::Trace => trace(&args.run, &out),
        ExportWhat::Sparsity => sparsity(&args.run, &out),
        ExportWhat::Deviation => deviation(&args.run, &out),
    }?;
    println!("wrote {}", out.display());
    Ok(())
}
